//! Cart-pole and acrobot replayed against episodes recorded from an
//! independent simulator (see `reference/classic_control_reference.py`).

use evollm::tasks::{run_episode, Acrobot, CartPole, Environment};
use serde::Deserialize;

#[derive(Deserialize)]
struct Episode {
    seed: u64,
    policy: String,
    initial_state: [f64; 4],
    gain: f64,
    steps: usize,
    #[serde(rename = "return")]
    ret: f64,
    final_state: [f64; 4],
    actions: Option<Vec<usize>>,
}

#[derive(Deserialize)]
struct Fixture {
    cartpole: Vec<Episode>,
    acrobot: Vec<Episode>,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("fixtures/classic_control.json")).unwrap()
}

fn replay<E: Environment>(env: &mut E, ep: &Episode, state: impl Fn(&E) -> [f64; 4], feedback: fn([f64; 4], f64) -> usize) -> (f64, usize) {
    let mut t = 0;
    run_episode(env, 500, |e| {
        let a = match (&ep.policy[..], &ep.actions) {
            ("script", Some(actions)) => actions[t],
            _ => feedback(state(e), ep.gain),
        };
        t += 1;
        Ok(a)
    })
    .unwrap()
}

fn cartpole_feedback(s: [f64; 4], gain: f64) -> usize {
    usize::from(s[2] + gain * s[3] > 0.0)
}

fn acrobot_feedback(s: [f64; 4], gain: f64) -> usize {
    if s[3] + (gain - 0.5) * s[2] > 0.0 {
        2
    } else {
        0
    }
}

fn assert_close(a: [f64; 4], b: [f64; 4], seed: u64) {
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "seed {seed}: {a:?} vs {b:?}");
    }
}

#[test]
fn cartpole_matches_reference_episodes() {
    for ep in fixture().cartpole {
        let mut env = CartPole::new(ep.initial_state);
        let (ret, steps) = replay(&mut env, &ep, |e| e.state, cartpole_feedback);
        assert_eq!((ret, steps), (ep.ret, ep.steps), "seed {}", ep.seed);
        assert!((0.0..=500.0).contains(&ret));
        assert_close(env.state, ep.final_state, ep.seed);
    }
}

#[test]
fn acrobot_matches_reference_episodes() {
    for ep in fixture().acrobot {
        let mut env = Acrobot::new(ep.initial_state);
        let (ret, steps) = replay(&mut env, &ep, |e| e.state, acrobot_feedback);
        assert_eq!((ret, steps), (ep.ret, ep.steps), "seed {}", ep.seed);
        assert!((-500.0..=0.0).contains(&ret));
        assert_close(env.state, ep.final_state, ep.seed);
    }
}

#[test]
fn states_stay_finite_under_random_actions() {
    let mut a = Acrobot::from_seed(1);
    let mut c = CartPole::from_seed(1);
    for t in 0..500 {
        a.step(t * 7 % 3);
        c.step(t % 2);
        assert!(a.state.iter().chain(&c.state).all(|v| v.is_finite()));
    }
}
