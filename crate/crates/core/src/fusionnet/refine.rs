//! Cascaded contrast refinement of a fused luminance plane.
//!
//! Each refinement step divides the fused plane by a learned, sigmoid-bounded
//! balance map, which brightens dim regions; a guard added to the denominator
//! keeps the division finite and a final clamp returns the result to [0, 1].
//! The balance network reads the fused plane shifted by a learned content
//! adjustment of the infrared channel, concatenated with that channel.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, ParamSet};
use crate::rng::Rng;
use crate::Scalar;

use super::FusionConfig;

/// The two refinement networks.
///
/// Content adjustment: five 3x3 convolutions (1 -> 16 -> 16 -> 16 -> 16 -> 1),
/// the first four followed by batch normalization and ReLU, the last by
/// Sigmoid. Contrast balance: three 3x3 convolutions (2 -> 16 -> 16 -> 1),
/// the first two followed by ReLU, the last by Sigmoid. Both therefore map
/// into (0, 1).
#[derive(Debug, Clone)]
pub struct RefinementNets {
    adjust_convs: [Conv2d; 5],
    adjust_norms: [BatchNorm2d; 4],
    balance_convs: [Conv2d; 3],
}

impl RefinementNets {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, r: &mut Rng) -> Self {
        let widths_a = [(1usize, 16usize), (16, 16), (16, 16), (16, 16), (16, 1)];
        let adjust_convs = core::array::from_fn(|i| {
            let (ic, oc) = widths_a[i];
            Conv2d::new(ps, &format!("refine.adjust.conv{i}"), ic, oc, 3, 1, 1, true, r)
        });
        let adjust_norms =
            core::array::from_fn(|i| BatchNorm2d::new(ps, &format!("refine.adjust.norm{i}"), 16));
        let widths_b = [(2usize, 16usize), (16, 16), (16, 1)];
        let balance_convs = core::array::from_fn(|i| {
            let (ic, oc) = widths_b[i];
            Conv2d::new(ps, &format!("refine.balance.conv{i}"), ic, oc, 3, 1, 1, true, r)
        });
        RefinementNets { adjust_convs, adjust_norms, balance_convs }
    }

    /// Learned adjustment map of the infrared channel, in (0, 1).
    pub fn content_adjust<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        infrared: Var,
    ) -> Result<Var> {
        let dims = tape.dims(infrared);
        if dims.len() != 3 || dims[0] != 1 {
            return Err(Error::dimension(format!(
                "content adjustment expects a [1, h, w] plane, got {dims:?}"
            )));
        }
        let mut x = infrared;
        for i in 0..4 {
            x = self.adjust_convs[i].forward(tape, ps, x);
            x = self.adjust_norms[i].forward(tape, ps, x);
            x = tape.relu(x);
        }
        let x = self.adjust_convs[4].forward(tape, ps, x);
        Ok(tape.sigmoid(x))
    }

    /// Learned balance map from a [2, h, w] stack, in (0, 1).
    pub fn contrast_balance<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        stack: Var,
    ) -> Result<Var> {
        let dims = tape.dims(stack);
        if dims.len() != 3 || dims[0] != 2 {
            return Err(Error::dimension(format!(
                "contrast balance expects a [2, h, w] stack, got {dims:?}"
            )));
        }
        let mut x = stack;
        for i in 0..2 {
            x = self.balance_convs[i].forward(tape, ps, x);
            x = tape.relu(x);
        }
        let x = self.balance_convs[2].forward(tape, ps, x);
        Ok(tape.sigmoid(x))
    }

    /// Zeroes both final convolutions, pinning the untrained adjustment and
    /// balance maps to the neutral constant sigmoid(0) = 0.5.
    pub fn zero_init_outputs<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        self.adjust_convs[4].zero_init(ps);
        self.balance_convs[2].zero_init(ps);
    }

    /// Final convolution of the balance network; exposed so tests can pin
    /// its output via bias saturation.
    pub fn balance_head(&self) -> &Conv2d {
        &self.balance_convs[2]
    }
}

/// Counts refinement steps so orchestration can be audited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefineStats {
    pub steps: u64,
}

impl RefineStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.steps = 0;
    }
}

/// Everything one refinement step produces. `refined` is the clamped output
/// that feeds the next step; `pre_clamp` is the raw quotient; `adjust` and
/// `balance` are the network maps (the adjustment map is what the smoothness
/// objective penalizes).
#[derive(Debug, Clone, Copy)]
pub struct RefineOutcome {
    pub refined: Var,
    pub pre_clamp: Var,
    pub adjust: Var,
    pub balance: Var,
}

/// One contrast-refinement step:
/// `refined = clamp01(fused / (balance([fused + adjust(ir), ir]) + eps_div))`.
pub fn refine_step<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    nets: &RefinementNets,
    fused: Var,
    infrared: Var,
    eps_div: f64,
    stats: &mut RefineStats,
) -> Result<RefineOutcome> {
    let df = tape.dims(fused);
    let di = tape.dims(infrared);
    if df != di || df.len() != 3 || df[0] != 1 {
        return Err(Error::dimension(format!(
            "refinement needs matching [1, h, w] planes, got {df:?} and {di:?}"
        )));
    }
    if !(eps_div > 0.0) {
        return Err(Error::config(format!("eps_div must be positive, got {eps_div}")));
    }
    let adjust = nets.content_adjust(tape, ps, infrared)?;
    let shifted = tape.add(fused, adjust);
    let stack = tape.concat_dim0(&[shifted, infrared]);
    let balance = nets.contrast_balance(tape, ps, stack)?;
    let denom = tape.add_scalar(balance, T::of_f64(eps_div));
    let pre_clamp = tape.div(fused, denom);
    let refined = tape.clamp01(pre_clamp);
    stats.steps += 1;
    Ok(RefineOutcome { refined, pre_clamp, adjust, balance })
}

/// Runs `adjust_iterations` refinement steps inside each of
/// `cascaded_stages` stages, threading the refined plane forward. Zero
/// iterations (a testing override) return the input unchanged.
pub fn cascaded_refine<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    nets: &RefinementNets,
    fused_y: Var,
    infrared: Var,
    config: &FusionConfig,
    stats: &mut RefineStats,
) -> Result<Var> {
    let mut state = fused_y;
    for _stage in 0..config.cascaded_stages {
        for _iter in 0..config.adjust_iterations {
            state = refine_step(tape, ps, nets, state, infrared, config.eps_div, stats)?.refined;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    fn plane(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::filled(alloc::vec![1, h, w], v)
    }

    fn random_plane(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::zeros(alloc::vec![1, h, w]);
        for v in t.data_mut() {
            *v = rng::gen_unit_f64(&mut r);
        }
        t
    }

    #[test]
    fn zeroed_heads_pin_both_maps_to_one_half() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(2);
        let nets = RefinementNets::new(&mut ps, &mut r);
        nets.zero_init_outputs(&mut ps);

        let mut tape = Tape::new();
        let ir = tape.leaf(random_plane(8, 8, 3));
        let a = nets.content_adjust(&mut tape, &ps, ir).unwrap();
        assert!(tape.value(a).data().iter().all(|v| *v == 0.5));

        let f = tape.leaf(random_plane(8, 8, 4));
        let stack = tape.concat_dim0(&[f, ir]);
        let b = nets.contrast_balance(&mut tape, &ps, stack).unwrap();
        assert!(tape.value(b).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn neutral_balance_pins_the_quotient_to_the_guarded_input() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(5);
        let nets = RefinementNets::new(&mut ps, &mut r);
        // Saturate the balance head: zero weights, huge bias -> sigmoid = 1.
        nets.balance_head().zero_init(&mut ps);
        ps.get_mut(nets.balance_head().bias.unwrap()).fill(100.0);

        let fused = random_plane(6, 7, 9);
        let mut tape = Tape::new();
        let fv = tape.leaf(fused.clone());
        let iv = tape.leaf(random_plane(6, 7, 10));
        let mut stats = RefineStats::new();
        let out = refine_step(&mut tape, &ps, &nets, fv, iv, 1e-4, &mut stats).unwrap();
        for (got, x) in tape.value(out.pre_clamp).data().iter().zip(fused.data()) {
            let want = x / (1.0 + 1e-4);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mid_gray_input_through_neutral_nets_doubles_before_the_clamp() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(6);
        let nets = RefinementNets::new(&mut ps, &mut r);
        nets.zero_init_outputs(&mut ps);

        let mut tape = Tape::new();
        let fv = tape.leaf(plane(5, 5, 0.4));
        let iv = tape.leaf(plane(5, 5, 0.3));
        let mut stats = RefineStats::new();
        let out = refine_step(&mut tape, &ps, &nets, fv, iv, 1e-4, &mut stats).unwrap();
        let want = 0.4 / (0.5 + 1e-4);
        for got in tape.value(out.pre_clamp).data() {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for got in tape.value(out.refined).data() {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_finite_and_clamped_for_arbitrary_parameters_and_zero_pixels() {
        for seed in 0..5u64 {
            let mut ps = ParamSet::<f64>::new();
            let mut r = rng::seeded(100 + seed);
            let nets = RefinementNets::new(&mut ps, &mut r);
            let mut fused = random_plane(8, 9, seed);
            fused.data_mut()[0] = 0.0;
            fused.data_mut()[5] = 0.0;
            let mut tape = Tape::new();
            let fv = tape.leaf(fused);
            let iv = tape.leaf(random_plane(8, 9, 50 + seed));
            let mut stats = RefineStats::new();
            let out = refine_step(&mut tape, &ps, &nets, fv, iv, 1e-4, &mut stats).unwrap();
            for v in tape.value(out.refined).data() {
                assert!(v.is_finite() && (0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn cascade_counts_stages_times_iterations_steps() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(8);
        let nets = RefinementNets::new(&mut ps, &mut r);
        let mut tape = Tape::new();
        let fv = tape.leaf(random_plane(8, 8, 1));
        let iv = tape.leaf(random_plane(8, 8, 2));
        let cfg = FusionConfig { cascaded_stages: 3, adjust_iterations: 3, ..Default::default() };
        let mut stats = RefineStats::new();
        cascaded_refine(&mut tape, &ps, &nets, fv, iv, &cfg, &mut stats).unwrap();
        assert_eq!(stats.steps, 9);
    }

    #[test]
    fn zero_iterations_return_the_input_untouched() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(9);
        let nets = RefinementNets::new(&mut ps, &mut r);
        let fused = random_plane(7, 6, 3);
        let mut tape = Tape::new();
        let fv = tape.leaf(fused.clone());
        let iv = tape.leaf(random_plane(7, 6, 4));
        let cfg = FusionConfig { adjust_iterations: 0, ..Default::default() };
        let mut stats = RefineStats::new();
        let out = cascaded_refine(&mut tape, &ps, &nets, fv, iv, &cfg, &mut stats).unwrap();
        assert_eq!(stats.steps, 0);
        assert_eq!(tape.value(out).data(), fused.data());
    }

    #[test]
    fn mismatched_planes_are_rejected() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng::seeded(10);
        let nets = RefinementNets::new(&mut ps, &mut r);
        let mut tape = Tape::new();
        let fv = tape.leaf(random_plane(8, 8, 1));
        let iv = tape.leaf(random_plane(8, 7, 2));
        let mut stats = RefineStats::new();
        assert!(refine_step(&mut tape, &ps, &nets, fv, iv, 1e-4, &mut stats).is_err());
    }
}
