"""Regenerates tests/fixtures/classic_control.json from gymnasium's CartPole-v1
and Acrobot-v1 implementations.

Each episode pins its initial state explicitly and drives the environment with
either a fixed action script or a simple state-feedback rule, so the Rust
simulators can replay the same episodes without sharing an RNG.

    pip install gymnasium
    python3 classic_control_reference.py > ../fixtures/classic_control.json
"""

import json
import random

import gymnasium as gym
import numpy as np

MAX_STEPS = 500


def cartpole_feedback(state, gain):
    _, _, theta, theta_dot = state
    return 1 if theta + gain * theta_dot > 0.0 else 0


def acrobot_feedback(state, gain):
    # torque follows the second joint's velocity, which pumps energy into the swing
    return 2 if state[3] + (gain - 0.5) * state[2] > 0.0 else 0


def run(env_id, seed, policy):
    rng = random.Random(seed)
    env = gym.make(env_id).unwrapped
    env.reset(seed=seed)
    half = 0.05 if env_id.startswith("CartPole") else 0.1
    init = [rng.uniform(-half, half) for _ in range(4)]
    env.state = np.array(init, dtype=np.float64)
    n_actions = env.action_space.n
    actions = [rng.randrange(n_actions) for _ in range(MAX_STEPS)]
    gain = rng.uniform(0.1, 1.0)
    feedback = cartpole_feedback if env_id.startswith("CartPole") else acrobot_feedback

    total = 0.0
    steps = 0
    for t in range(MAX_STEPS):
        if policy == "script":
            a = actions[t]
        else:
            a = feedback([float(v) for v in env.state], gain)
        _, reward, terminated, _, _ = env.step(a)
        total += reward
        steps += 1
        if terminated:
            break
    episode = {
        "seed": seed,
        "policy": policy,
        "initial_state": init,
        "gain": gain,
        "steps": steps,
        "return": total,
        "final_state": [float(v) for v in env.state],
    }
    if policy == "script":
        episode["actions"] = actions
    return episode


def main():
    out = {}
    for key, env_id in (("cartpole", "CartPole-v1"), ("acrobot", "Acrobot-v1")):
        episodes = []
        for seed in range(50):
            policy = "script" if seed % 2 == 0 else "feedback"
            episodes.append(run(env_id, 1000 + seed, policy))
        out[key] = episodes
    print(json.dumps(out))


if __name__ == "__main__":
    main()
