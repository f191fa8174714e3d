"""Navigation metrics and forgetting rates on hand-built trajectories."""

import numpy as np

from tucker_adapters.metrics import (
    EpisodeRecord,
    TaskScore,
    forgetting_rate,
    oracle_success,
    render_table,
    spl,
    success_rate,
)

print("=== one episode, three metrics ===")
straight = np.column_stack([np.arange(9.0), np.zeros(9)])
rec = EpisodeRecord(trajectory=straight, goal=np.array([8.0, 0.0]),
                    tl_ref=8.0, epsilon=3.0)
print(f"perfect straight run: SR={success_rate(rec)} OSR={oracle_success(rec)} "
      f"SPL={spl(rec):.2f}")

detour = np.column_stack([np.arange(17.0) / 2.0, np.zeros(17)])
rec2 = EpisodeRecord(trajectory=np.vstack([detour, detour[::-1], straight]),
                     goal=np.array([8.0, 0.0]), tl_ref=8.0, epsilon=3.0)
print(f"wandering but successful: SR={success_rate(rec2)} "
      f"SPL={spl(rec2):.2f} (path efficiency penalized)")

flyby = EpisodeRecord(
    trajectory=np.column_stack([np.arange(25.0), np.zeros(25)]),
    goal=np.array([8.0, 0.0]), tl_ref=8.0, epsilon=1.0)
print(f"drives past the goal without stopping: SR={success_rate(flyby)} "
      f"but OSR={oracle_success(flyby)}")

print("\n=== forgetting rates ===")
print(f"reference 0.80 -> now 0.60: F = {forgetting_rate(0.80, 0.60):.2f}")
print(f"reference 0.80 -> now 0.80: F = {forgetting_rate(0.80, 0.80):.2f}")
print(f"reference 0.60 -> now 0.80: F = {forgetting_rate(0.60, 0.80):.2f} "
      "(negative = backward transfer)")
print(f"reference 0.00: F = {forgetting_rate(0.0, 0.5)} (undefined, not a crash)")

print("\n=== aggregated report ===")
scores = [
    TaskScore(task=0, sr=0.80, spl=0.71, osr=0.90, m_sr=0.82, m_spl=0.75,
              m_osr=0.90),
    TaskScore(task=1, sr=0.55, spl=0.47, osr=0.65, m_sr=0.78, m_spl=0.66,
              m_osr=0.85),
    TaskScore(task=2, sr=0.71, spl=0.66, osr=0.78, m_sr=0.66, m_spl=0.60,
              m_osr=0.74),
]
print(render_table(scores))
print("Values are percentages; task 2 shows negative forgetting "
      "(it improved after later tasks).")
