"""Drowsiness-delayed braking and a short agent training run.

First shows what the 0.5 s actuation delay does to a scripted emergency
stop, then trains a Double Dueling DQN for a few dozen episodes and runs a
paired (drowsy / alert) evaluation.  A real run uses 500 episodes; see the
README for the CLI equivalent.

    python demos/03_braking_agent.py [episodes]
"""
import sys

from drowsybrake.agent import AgentConfig, evaluate_paired, train
from drowsybrake.env import BrakingEnv, Scenario

# scripted stop: cruise at 15 m/s towards a parked car, brake hard at t = 2 s
scenario = Scenario(seed=0, init_spacing=60.0, lead_profile=((0.0, 0.0),))
for mode in ("off", "on"):
    env = BrakingEnv()
    env.reset(scenario=scenario, drowsy_mode=mode)
    env.ego.speed = 15.0
    res = None
    while not env.done:
        res = env.step(4 if env.t < 2.0 else 0)
        if env.ego.speed == 0.0 and env.t > 2.0:
            break
    print(f"drowsy={mode:>3}: stopped {env.gap:5.1f} m behind the lead, collided={env.collided}")

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 60
cfg = AgentConfig(warmup_threshold=1000, guided_episodes=min(50, episodes // 3))
report = train(BrakingEnv, "dddqn", episodes, seed=0, config=cfg,
               progress=lambda ep, r: print(f"  episode {ep:3d} reward {r:8.1f}") if ep % 10 == 0 else None)
print(f"final 10-episode average reward {report.moving_avg[-1]:.1f}")

ev = evaluate_paired(report.agent, 10, seed=0)
for k, v in ev.summary().items():
    if k in ("success_rate", "mean_reward", "mean_distance_m", "unsafe_time_drowsy_s", "unsafe_time_alert_s"):
        print(f"  {k:22s} {v:.3f}")
