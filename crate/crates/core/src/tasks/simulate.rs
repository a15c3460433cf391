use super::{AuxSequence, Theta, TrialRecord};

pub const DT: f64 = 0.05;
pub const STEPS_PER_LEVEL: usize = 20;
pub const LEVELS: usize = 56;
pub const DESIGN_DIM: usize = 4;
/// Position, velocity, current disturbance and termination flag.
pub const AUX_CHANNELS: usize = 4;

/// Disturbance of ramp level `j`: 0.5, 0.6, …, 6.0.
pub fn level_value(j: usize) -> f64 {
    (5 + j) as f64 / 10.0
}

/// Runs the full ramp for design `x` on task `theta`.
pub fn simulate_trial(theta: &Theta, x: &[f64]) -> TrialRecord {
    simulate_trial_with_levels(theta, x, LEVELS)
}

/// Same as [`simulate_trial`] with the ramp cut after `levels` levels.
pub fn simulate_trial_with_levels(theta: &Theta, x: &[f64], levels: usize) -> TrialRecord {
    assert_eq!(x.len(), DESIGN_DIM, "designs have {DESIGN_DIM} coordinates");
    assert!((1..=LEVELS).contains(&levels));
    let Theta { k, c, m, g0 } = *theta;
    let (mut s, mut v) = (g0, 0.0);
    let mut h = Vec::with_capacity(levels * AUX_CHANNELS);
    let mut raw_step = 0usize;
    for level in 0..levels {
        let force = level_value(level);
        for _ in 0..STEPS_PER_LEVEL {
            let arg = x[0] + x[1] * (s - g0) + x[2] * v + x[3] * (std::f64::consts::PI * s).sin();
            let u = 2.0 * arg.tanh();
            let accel = -k * (s - g0) - c * v + u + force;
            let (s_next, v_next) = (s + DT * v, v + (DT / m) * accel);
            s = s_next;
            v = v_next;
            raw_step += 1;
            if (s - g0).abs() > 1.0 {
                h.extend_from_slice(&[s, v, force, 1.0]);
                let f = if level == 0 { 0.0 } else { level_value(level - 1) };
                return record(x, f, h);
            }
            if raw_step % STEPS_PER_LEVEL == 0 {
                h.extend_from_slice(&[s, v, force, 0.0]);
            }
        }
    }
    record(x, level_value(levels - 1), h)
}

fn record(x: &[f64], f: f64, h: Vec<f64>) -> TrialRecord {
    TrialRecord {
        x: x.to_vec(),
        f,
        h: AuxSequence::new(AUX_CHANNELS, h),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_grid_and_sequence_length() {
        let theta = Theta {
            k: 1.0,
            c: 0.3,
            m: 1.0,
            g0: 0.0,
        };
        let r = simulate_trial(&theta, &[0.0; 4]);
        assert!(r.f == 0.0 || (0.5..=6.0).contains(&r.f));
        assert!(r.h.len() <= LEVELS);
        assert_eq!(r.f, (r.f * 10.0).round() / 10.0);
    }
}
