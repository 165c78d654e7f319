//! The three activation regimes: LIF cells, LIAF cells, and the annealed
//! soft-ReLU, plus rate decoding.
//!
//! Conventions pinned here and relied on everywhere else:
//!
//! * Fire iff `u > u_th` strictly. The boundary is measure-zero for training
//!   but must be fixed for bit-exact tests.
//! * Membrane update order: `u' = (u · decay) · (1 − reset) + (x + bias)`,
//!   with `x + bias` formed first. The taped training path replays the same
//!   sequence so inference and training forwards agree bitwise.
//! * Initial state is `u = 0, o = 0` for every sequence.
//! * The additive bias is per-channel in networks (the layer's bias
//!   parameter); `LifParams::bias` is the scalar form used by the bare cell.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cell parameters shared by LIF and LIAF.
#[derive(Debug, Clone, Copy)]
pub struct LifParams {
    /// Membrane time constant, in timestep units; the decay factor per step
    /// is `e^(−1/tau)`.
    pub tau: f64,
    /// Threshold voltage.
    pub u_th: f64,
    /// Additive input current per step.
    pub bias: f64,
    /// Simulation timesteps.
    pub t_steps: u32,
}

impl LifParams {
    pub fn new(tau: f64, u_th: f64, bias: f64, t_steps: u32) -> Result<Self> {
        let p = LifParams { tau, u_th, bias, t_steps };
        let d = p.decay();
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::contract(
                "LifParams",
                format!("decay e^(-1/tau) = {} not in (0,1); tau = {}", d, tau),
            ));
        }
        if u_th <= 0.0 {
            return Err(Error::contract("LifParams", format!("u_th = {} must be > 0", u_th)));
        }
        if t_steps == 0 {
            return Err(Error::contract("LifParams", "t_steps must be ≥ 1"));
        }
        Ok(p)
    }

    pub fn decay(&self) -> f64 {
        (-1.0 / self.tau).exp()
    }
}

/// Membrane voltage and last output of one cell layer. `o` is binary for
/// LIF and real-valued for LIAF.
#[derive(Debug, Clone)]
pub struct NeuronCellState {
    pub u: Tensor,
    pub o: Tensor,
}

impl NeuronCellState {
    /// Zero state used at t = 0.
    pub fn zeros(shape: &[usize]) -> Self {
        NeuronCellState {
            u: Tensor::zeros(shape),
            o: Tensor::zeros(shape),
        }
    }
}

/// LIAF's transmitted activation. The reset signal stays binary regardless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalogAct {
    /// Rectified-linear on the membrane (the default).
    Relu,
    /// Degenerate mode: the binary step at `u_th`, which makes a LIAF cell
    /// coincide with a LIF cell exactly.
    Step,
}

fn check_state(op: &'static str, state: &NeuronCellState, x: &Tensor) -> Result<()> {
    if state.u.shape() != x.shape() || state.o.shape() != x.shape() {
        return Err(Error::shape(
            op,
            format!(
                "state u {:?} / o {:?} vs input {:?}",
                state.u.shape(),
                state.o.shape(),
                x.shape()
            ),
        ));
    }
    Ok(())
}

/// Core membrane recursion. `reset` must be the binary fired-last-step
/// indicator and `xb` the input current with bias already added.
fn membrane_update(u: &Tensor, reset: impl Fn(usize) -> f64, xb: &Tensor, decay: f64) -> Tensor {
    let mut out = Tensor::zeros(u.shape());
    for (i, ov) in out.data_mut().iter_mut().enumerate() {
        let t1 = u.data()[i] * decay;
        let t2 = t1 * (1.0 - reset(i));
        *ov = t2 + xb.data()[i];
    }
    out
}

/// One LIF step: `u' = u·e^(−1/τ)·(1−o) + x + bias`, then fire where
/// `u' > u_th`. Neurons that fired last step lose their decay contribution
/// entirely, so a just-fired neuron's next membrane is `x + bias` exactly.
pub fn lif_step(state: &NeuronCellState, x: &Tensor, p: &LifParams) -> Result<NeuronCellState> {
    check_state("lif_step", state, x)?;
    let xb = x.add_scalar(p.bias);
    let o_prev = &state.o;
    let u = membrane_update(&state.u, |i| o_prev.data()[i], &xb, p.decay());
    let o = u.map(|v| if v > p.u_th { 1.0 } else { 0.0 });
    Ok(NeuronCellState { u, o })
}

/// One LIAF step: membrane update and binary reset exactly as in `lif_step`
/// (reset decided by the previous membrane exceeding `u_th`), but the
/// transmitted output is `analog_act(u')`.
pub fn liaf_step(
    state: &NeuronCellState,
    x: &Tensor,
    p: &LifParams,
    analog_act: AnalogAct,
) -> Result<NeuronCellState> {
    check_state("liaf_step", state, x)?;
    let xb = x.add_scalar(p.bias);
    let u_prev = &state.u;
    let u_th = p.u_th;
    let u = membrane_update(
        &state.u,
        |i| if u_prev.data()[i] > u_th { 1.0 } else { 0.0 },
        &xb,
        p.decay(),
    );
    let o = match analog_act {
        AnalogAct::Relu => u.map(|v| v.max(0.0)),
        AnalogAct::Step => u.map(|v| if v > u_th { 1.0 } else { 0.0 }),
    };
    Ok(NeuronCellState { u, o })
}

/// Knees of the annealed soft-ReLU. `beta` is always derived from `alpha`
/// through the symmetry `alpha + beta = 2·u_th`.
#[derive(Debug, Clone, Copy)]
pub struct SReluParams {
    pub alpha: f64,
    pub beta: f64,
    pub u_th: f64,
}

impl SReluParams {
    pub fn new(alpha: f64, u_th: f64) -> Result<Self> {
        let beta = 2.0 * u_th - alpha;
        if !(alpha < beta) {
            return Err(Error::contract(
                "SReluParams",
                format!("alpha {} must stay below beta {} (u_th {})", alpha, beta, u_th),
            ));
        }
        Ok(SReluParams { alpha, beta, u_th })
    }
}

/// Soft-ReLU ramp: 0 below `alpha`, 1 above `beta`, linear between.
pub fn srelu(u: &Tensor, p: &SReluParams) -> Tensor {
    let inv = 1.0 / (p.beta - p.alpha);
    u.map(|v| {
        if v < p.alpha {
            0.0
        } else if v > p.beta {
            1.0
        } else {
            (v - p.alpha) * inv
        }
    })
}

/// Scalar form of `srelu`, shared with the taped forward.
pub fn srelu_scalar(v: f64, p: &SReluParams) -> f64 {
    if v < p.alpha {
        0.0
    } else if v > p.beta {
        1.0
    } else {
        (v - p.alpha) / (p.beta - p.alpha)
    }
}

/// The annealing schedule: `alpha` rises linearly from 0 to `u_th` over the
/// epochs, clamped to `u_th·(1 − 1e-6)` so the ramp always has width — except
/// at the final epoch, where the returned value is exactly `u_th`, the
/// sentinel for "exact step in force" (see [`SannActivation::for_alpha`]).
pub fn srelu_alpha_schedule(epoch: u32, total_epochs: u32, u_th: f64) -> f64 {
    assert!(total_epochs >= 1, "total_epochs must be ≥ 1");
    assert!(epoch <= total_epochs, "epoch beyond total_epochs");
    if epoch == total_epochs {
        return u_th;
    }
    let raw = u_th * epoch as f64 / total_epochs as f64;
    raw.min(u_th * (1.0 - 1e-6))
}

/// The activation actually applied during an annealed stage: a ramp while
/// `alpha < u_th`, the exact threshold step once the schedule saturates.
#[derive(Debug, Clone, Copy)]
pub enum SannActivation {
    Ramp(SReluParams),
    Step { u_th: f64 },
}

impl SannActivation {
    pub fn for_alpha(alpha: f64, u_th: f64) -> Result<Self> {
        if alpha >= u_th {
            Ok(SannActivation::Step { u_th })
        } else {
            Ok(SannActivation::Ramp(SReluParams::new(alpha, u_th)?))
        }
    }

    pub fn apply_scalar(&self, v: f64) -> f64 {
        match self {
            SannActivation::Ramp(p) => srelu_scalar(v, p),
            SannActivation::Step { u_th } => {
                if v > *u_th {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(&self, u: &Tensor) -> Tensor {
        u.map(|v| self.apply_scalar(v))
    }
}

/// Mean over the time axis: [T,N,Classes] → [N,Classes]. For binary spike
/// inputs every decoded value lies in [0,1].
pub fn rate_decode(spike_outputs: &Tensor) -> Result<Tensor> {
    if spike_outputs.rank() != 3 {
        return Err(Error::shape(
            "rate_decode",
            format!("expected [T,N,Classes], got {:?}", spike_outputs.shape()),
        ));
    }
    let (t, n, c) = (
        spike_outputs.shape()[0],
        spike_outputs.shape()[1],
        spike_outputs.shape()[2],
    );
    if t == 0 {
        return Err(Error::contract("rate_decode", "T must be ≥ 1"));
    }
    let mut out = Tensor::zeros(&[n, c]);
    for step in 0..t {
        let frame = &spike_outputs.data()[step * n * c..(step + 1) * n * c];
        for (o, &v) in out.data_mut().iter_mut().zip(frame) {
            *o += v;
        }
    }
    let inv = 1.0 / t as f64;
    for o in out.data_mut() {
        *o *= inv;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn params(tau: f64, u_th: f64, bias: f64) -> LifParams {
        LifParams::new(tau, u_th, bias, 8).unwrap()
    }

    #[test]
    fn lif_hand_recursion_trace() {
        let p = params(1.0 / std::f64::consts::LN_2, 1.0, 0.0);
        assert!((p.decay() - 0.5).abs() < 1e-15);
        let x = Tensor::scalar(0.6);
        let mut state = NeuronCellState::zeros(&[1]);
        let expect_u = [0.6, 0.9, 1.05, 0.6];
        let expect_o = [0.0, 0.0, 1.0, 0.0];
        for t in 0..4 {
            state = lif_step(&state, &x, &p).unwrap();
            assert!(
                (state.u.data()[0] - expect_u[t]).abs() < 1e-12,
                "step {}: u = {}",
                t,
                state.u.data()[0]
            );
            assert_eq!(state.o.data()[0], expect_o[t]);
        }
    }

    #[test]
    fn lif_quiescent_without_input() {
        let p = params(2.0, 1.0, 0.0);
        let x = Tensor::zeros(&[4]);
        let mut state = NeuronCellState::zeros(&[4]);
        for _ in 0..10 {
            state = lif_step(&state, &x, &p).unwrap();
            assert!(state.u.data().iter().all(|&v| v == 0.0));
            assert!(state.o.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lif_reset_discards_membrane_exactly() {
        let p = params(2.0, 1.0, 0.25);
        let state = NeuronCellState {
            u: Tensor::scalar(42.0),
            o: Tensor::scalar(1.0),
        };
        let x = Tensor::scalar(0.3);
        let next = lif_step(&state, &x, &p).unwrap();
        assert_eq!(next.u.data()[0], 0.3 + 0.25);
    }

    #[test]
    fn lif_outputs_strictly_binary() {
        let p = params(1.7, 0.5, 0.1);
        let mut rng = Rng::new(3);
        let mut state = NeuronCellState::zeros(&[16]);
        for _ in 0..50 {
            let x = Tensor::new(&[16], (0..16).map(|_| rng.uniform(-0.5, 1.0)).collect()).unwrap();
            state = lif_step(&state, &x, &p).unwrap();
            assert!(state.o.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn lif_matches_scalar_recursion_oracle() {
        let mut rng = Rng::new(91);
        for case in 0..50 {
            let tau = rng.uniform(0.5, 4.0);
            let u_th = rng.uniform(0.2, 1.5);
            let bias = rng.uniform(-0.2, 0.2);
            let p = params(tau, u_th, bias);
            let xs: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.5)).collect();
            // Independent scalar recursion, written exactly from the update
            // equations.
            let decay = (-1.0 / tau).exp();
            let mut u_ref = 0.0;
            let mut o_ref = 0.0;
            let mut state = NeuronCellState::zeros(&[1]);
            for (t, &xv) in xs.iter().enumerate() {
                u_ref = u_ref * decay * (1.0 - o_ref) + xv + bias;
                o_ref = if u_ref > u_th { 1.0 } else { 0.0 };
                state = lif_step(&state, &Tensor::scalar(xv), &p).unwrap();
                assert!(
                    (state.u.data()[0] - u_ref).abs() < 1e-12,
                    "case {} step {}: {} vs {}",
                    case,
                    t,
                    state.u.data()[0],
                    u_ref
                );
                assert_eq!(state.o.data()[0], o_ref);
            }
        }
    }

    #[test]
    fn liaf_step_mode_equals_lif_bitwise() {
        let p = params(1.3, 0.6, 0.05);
        let mut rng = Rng::new(17);
        let mut lif = NeuronCellState::zeros(&[8]);
        let mut liaf = NeuronCellState::zeros(&[8]);
        for _ in 0..32 {
            let x = Tensor::new(&[8], (0..8).map(|_| rng.uniform(-1.0, 1.2)).collect()).unwrap();
            lif = lif_step(&lif, &x, &p).unwrap();
            liaf = liaf_step(&liaf, &x, &p, AnalogAct::Step).unwrap();
            assert_eq!(lif.u.data(), liaf.u.data());
            assert_eq!(lif.o.data(), liaf.o.data());
        }
    }

    #[test]
    fn liaf_relu_below_threshold_passes_membrane() {
        let p = params(2.0, 1.0, 0.0);
        let state = NeuronCellState::zeros(&[1]);
        let next = liaf_step(&state, &Tensor::scalar(0.3), &p, AnalogAct::Relu).unwrap();
        assert_eq!(next.u.data()[0], 0.3);
        assert_eq!(next.o.data()[0], 0.3);
        // Below threshold, so the following step keeps the decay term.
        let after = liaf_step(&next, &Tensor::scalar(0.0), &p, AnalogAct::Relu).unwrap();
        assert!((after.u.data()[0] - 0.3 * p.decay()).abs() < 1e-15);
    }

    #[test]
    fn liaf_reset_pattern_matches_lif() {
        // With ReLU output the transmitted values differ, but which neurons
        // reset when must match a LIF run driven by the same membrane.
        let p = params(1.1, 0.5, 0.0);
        let mut rng = Rng::new(23);
        let mut liaf = NeuronCellState::zeros(&[6]);
        for _ in 0..8 {
            let x = Tensor::new(&[6], (0..6).map(|_| rng.uniform(-0.5, 1.0)).collect()).unwrap();
            let prev_u = liaf.u.clone();
            liaf = liaf_step(&liaf, &x, &p, AnalogAct::Relu).unwrap();
            for i in 0..6 {
                let fired = prev_u.data()[i] > p.u_th;
                let expect = if fired {
                    x.data()[i]
                } else {
                    prev_u.data()[i] * p.decay() + x.data()[i]
                };
                assert!((liaf.u.data()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn srelu_midpoint_and_saturation() {
        let p = SReluParams::new(0.2, 0.5).unwrap();
        assert!((p.beta - 0.8).abs() < 1e-15);
        let u = Tensor::scalar(0.5);
        assert!((srelu(&u, &p).data()[0] - 0.5).abs() < 1e-15);

        let wide = SReluParams::new(0.0, 0.5).unwrap();
        assert_eq!(srelu(&Tensor::scalar(-1.0), &wide).data()[0], 0.0);
        assert_eq!(srelu(&Tensor::scalar(1.5), &wide).data()[0], 1.0);
    }

    #[test]
    fn srelu_collapses_to_step_near_limit() {
        let u_th = 0.5;
        let p = SReluParams::new(u_th * (1.0 - 1e-7), u_th).unwrap();
        for i in 0..2000 {
            let v = -0.5 + i as f64 * 0.001;
            if (v - u_th).abs() <= 1e-6 {
                continue;
            }
            let soft = srelu_scalar(v, &p);
            let hard = if v > u_th { 1.0 } else { 0.0 };
            assert_eq!(soft, hard, "at u = {}", v);
        }
    }

    #[test]
    fn srelu_monotone_and_bounded() {
        let p = SReluParams::new(0.1, 0.5).unwrap();
        let mut prev = -1.0;
        for i in 0..500 {
            let v = -1.0 + i as f64 * 0.01;
            let s = srelu_scalar(v, &p);
            assert!((0.0..=1.0).contains(&s));
            assert!(s >= prev - 1e-15);
            prev = s;
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let u_th = 0.5;
        assert_eq!(srelu_alpha_schedule(0, 10, u_th), 0.0);
        assert_eq!(srelu_alpha_schedule(5, 10, u_th), 0.25);
        assert_eq!(srelu_alpha_schedule(10, 10, u_th), u_th);
        // One before the end: clamped strictly below u_th.
        let near = srelu_alpha_schedule(999_999, 1_000_000, u_th);
        assert!(near < u_th);
        assert!(near <= u_th * (1.0 - 1e-6) + 1e-18);
        match SannActivation::for_alpha(srelu_alpha_schedule(10, 10, u_th), u_th).unwrap() {
            SannActivation::Step { .. } => {}
            SannActivation::Ramp(_) => panic!("final epoch must be the exact step"),
        }
    }

    #[test]
    fn rate_decode_examples() {
        let ones = Tensor::full(&[4, 2, 3], 1.0);
        let r = rate_decode(&ones).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));

        let train = Tensor::new(&[6, 1, 1], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(rate_decode(&train).unwrap().data()[0], 0.5);
    }

    #[test]
    fn rate_decode_linear_and_permutation_equivariant() {
        let mut rng = Rng::new(5);
        let a = Tensor::new(&[3, 2, 4], (0..24).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let b = Tensor::new(&[3, 2, 4], (0..24).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        // Linearity.
        let lhs = rate_decode(&a.scale(2.0).add(&b).unwrap()).unwrap();
        let rhs = rate_decode(&a).unwrap().scale(2.0).add(&rate_decode(&b).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // Swapping two class columns before decoding equals swapping after.
        let mut swapped = a.clone();
        for t in 0..3 {
            for n in 0..2 {
                let i = swapped.offset(&[t, n, 1]);
                let j = swapped.offset(&[t, n, 3]);
                swapped.data_mut().swap(i, j);
            }
        }
        let dec_swapped = rate_decode(&swapped).unwrap();
        let dec = rate_decode(&a).unwrap();
        for n in 0..2 {
            assert_eq!(dec_swapped.at(&[n, 1]), dec.at(&[n, 3]));
            assert_eq!(dec_swapped.at(&[n, 3]), dec.at(&[n, 1]));
        }
    }

    #[test]
    fn lif_params_validation() {
        assert!(LifParams::new(0.0, 1.0, 0.0, 4).is_err());
        assert!(LifParams::new(-1.0, 1.0, 0.0, 4).is_err());
        assert!(LifParams::new(2.0, 0.0, 0.0, 4).is_err());
        assert!(LifParams::new(2.0, 1.0, 0.0, 0).is_err());
        assert!(SReluParams::new(0.5, 0.5).is_err());
    }
}
