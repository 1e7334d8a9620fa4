"""Reward shaping by hand: how the tool reward and group advantages respond to tool use.

Run with ``python demos/01_reward_shaping.py``.
"""

# %% [markdown]
# The shaped tool reward scales a task's benefit score by a Gaussian in the
# distance between the tool count and the budget. A helpful task (positive
# benefit) earns most at the budget; an unhelpful one is penalized most there.

# %%
import numpy as np

from adatool.atgrpo import group_advantages, shaped_tool_reward, total_reward

n_max, gamma = 4, 2.0
print("tools  helpful(+0.5)  unhelpful(-0.25)")
for n in range(n_max + 1):
    up = shaped_tool_reward(0.5, n, n_max, gamma)
    down = shaped_tool_reward(-0.25, n, n_max, gamma)
    print(f"{n:5d}  {up:13.6f}  {down:16.6f}")

# %% [markdown]
# A group of four rollouts on the same helpful task. Three answer correctly
# (base reward 1.1 with the format bonus), one answers wrongly (0.1). The
# total reward adds 0.6 times the tool reward, and the advantages normalize the
# totals within the group.

# %%
tools = [0, 1, 2, 4]
bases = [1.1, 1.1, 0.1, 1.1]
totals = [total_reward(b, shaped_tool_reward(0.5, n, n_max, gamma), 0.6) for b, n in zip(bases, tools)]
adv = group_advantages(totals)
for n, b, t, a in zip(tools, bases, totals, adv):
    print(f"tools={n} base={b:.1f} total={t:.6f} advantage={a:+.6f}")

# %% [markdown]
# With the shaping term removed every correct rollout ties, so tool use stops
# mattering to the update.

# %%
print(np.round(group_advantages([total_reward(b, 0.0, 0.0) for b in bases]), 6))
