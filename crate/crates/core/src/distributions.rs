//! Categorical draws as stochastic graph events, and their Gumbel
//! relaxation.
//!
//! A hard draw produces a `CategoricalSample`: the chosen index plus a
//! differentiable log-probability node, which is everything a score-function
//! estimator needs. A Gumbel draw instead produces a vector-valued node the
//! decoder can feed forward, absorbing the randomness into reparameterized
//! noise so no stochastic node is registered.

use crate::error::{Error, Result};
use crate::graph::{softmax_slice, Graph, NodeRef};
use crate::rng::RngStream;
use crate::sampling::DrawSource;
use crate::tensor::{Shape, Tensor};

/// One realized discrete choice during a decode.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalSample {
    pub index: usize,
    /// Scalar node holding log p(index | logits), differentiable w.r.t.
    /// the logits.
    pub log_prob: NodeRef,
    /// Decoder time step the draw happened at.
    pub step: usize,
}

/// Draw from softmax(logits) and register the event on the graph.
pub fn sample_categorical(
    g: &mut Graph,
    logits: NodeRef,
    rng: &mut RngStream,
    step: usize,
) -> Result<CategoricalSample> {
    let mut src = DrawSource::rng(rng);
    sample_categorical_from(g, logits, &mut src, step)
}

/// Same as [`sample_categorical`] but with a caller-controlled outcome
/// source, so enumeration can replay every path through sampling code.
pub fn sample_categorical_from(
    g: &mut Graph,
    logits: NodeRef,
    src: &mut DrawSource,
    step: usize,
) -> Result<CategoricalSample> {
    let probs = match g.value(logits)?.shape() {
        Shape::Vector(n) if n > 0 => softmax_slice(g.value(logits)?.data()),
        s => {
            return Err(Error::shape(
                "sample_categorical",
                format!("expected non-empty vector logits, got {s}"),
            ))
        }
    };
    let index = src.draw(&probs)?;
    let log_probs = g.log_softmax(logits)?;
    let log_prob = g.pick(log_probs, index)?;
    g.register_stochastic();
    Ok(CategoricalSample {
        index,
        log_prob,
        step,
    })
}

/// Standard Gumbel(0,1) noise vector.
pub fn gumbel_noise(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

/// A Gumbel-relaxed draw: the node to feed forward and the hard index it
/// corresponds to (argmax of the perturbed logits).
#[derive(Debug, Clone, Copy)]
pub struct GumbelDraw {
    pub node: NodeRef,
    pub index: usize,
}

/// Relaxed sample y = softmax((logits + g)/τ). With `straight_through`
/// the node's forward value is onehot(argmax y) while backward treats it
/// as y.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: NodeRef,
    temperature: f64,
    rng: &mut RngStream,
    straight_through: bool,
) -> Result<GumbelDraw> {
    let n = g.value(logits)?.shape().len();
    let noise = gumbel_noise(rng, n);
    gumbel_softmax_with_noise(g, logits, temperature, &noise, straight_through)
}

/// [`gumbel_softmax`] with caller-supplied noise. Frozen noise makes the
/// relaxed forward a deterministic function of the parameters, which is
/// what finite-difference checks need.
pub fn gumbel_softmax_with_noise(
    g: &mut Graph,
    logits: NodeRef,
    temperature: f64,
    noise: &[f64],
    straight_through: bool,
) -> Result<GumbelDraw> {
    if temperature <= 0.0 {
        return Err(Error::invalid(
            "gumbel_softmax",
            format!("temperature must be positive, got {temperature}"),
        ));
    }
    match g.value(logits)?.shape() {
        Shape::Vector(n) if n == noise.len() && n > 0 => {}
        s => {
            return Err(Error::shape(
                "gumbel_softmax",
                format!("logits {s} vs noise length {}", noise.len()),
            ))
        }
    }
    let perturbed = g.add_tensor(logits, &Tensor::vector(noise.to_vec()))?;
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    let soft = g.softmax(scaled)?;
    // argmax of y equals argmax of the perturbed logits; read it off the
    // pre-softmax node to avoid depending on downstream rounding.
    let index = g.value(perturbed)?.argmax()?;
    let node = if straight_through {
        g.straight_through(soft, index)?
    } else {
        soft
    };
    Ok(GumbelDraw { node, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ParamStore;

    #[test]
    fn uniform_long_run_mean_is_centered() {
        let mut rng = RngStream::new(7, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut min = 1.0_f64;
        for _ in 0..n {
            let u = rng.uniform_open();
            sum += u;
            min = min.min(u);
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(min > 0.0);
    }

    #[test]
    fn gumbel_noise_mean_near_euler_mascheroni() {
        let mut rng = RngStream::new(11, 0);
        let n = 1_000_000;
        let noise = gumbel_noise(&mut rng, n);
        assert!(noise.iter().all(|v| v.is_finite()));
        let mean: f64 = noise.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5772).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn peaked_logits_sample_the_peak() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(3, 0);
        let mut hits = 0;
        for _ in 0..10_000 {
            let mut g = Graph::new(&s);
            let logits = g
                .constant(Tensor::vector(vec![50.0, -50.0, -50.0, -50.0]))
                .unwrap();
            let z = sample_categorical(&mut g, logits, &mut rng, 0).unwrap();
            if z.index == 0 {
                hits += 1;
            }
        }
        assert!(hits >= 9990, "hits {hits}");
    }

    #[test]
    fn flat_logits_split_evenly() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(21, 4);
        let mut g = Graph::new(&s);
        let logits = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut count0 = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let z = sample_categorical(&mut g, logits, &mut rng, 0).unwrap();
            if z.index == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn log_prob_gradient_is_onehot_minus_softmax() {
        let mut s = ParamStore::new();
        let theta = s
            .register("theta", Tensor::vector(vec![0.3, -0.7, 1.1]))
            .unwrap();
        let mut g = Graph::new(&s);
        let logits = g.param(&s, theta).unwrap();
        let forced = [2usize];
        let mut src = DrawSource::forced(&forced);
        let z = sample_categorical_from(&mut g, logits, &mut src, 0).unwrap();
        assert_eq!(z.index, 2);
        assert_eq!(g.n_stochastic(), 1);

        let grads = g.grad_wrt(z.log_prob, &[logits]).unwrap();
        let probs = softmax_slice(&[0.3, -0.7, 1.1]);
        for (i, gi) in grads[0].data().iter().enumerate() {
            let expect = if i == 2 { 1.0 - probs[i] } else { -probs[i] };
            assert!((gi - expect).abs() < 1e-12, "coord {i}: {gi} vs {expect}");
        }
    }

    #[test]
    fn sampled_log_prob_value_is_in_unit_interval() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(8, 8);
        for _ in 0..100 {
            let mut g = Graph::new(&s);
            let logits = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
            let z = sample_categorical(&mut g, logits, &mut rng, 3).unwrap();
            let p = g.item(z.log_prob).unwrap().exp();
            assert!(p > 0.0 && p <= 1.0);
            assert_eq!(z.step, 3);
        }
    }

    #[test]
    fn gumbel_max_frequency_matches_categorical() {
        let s = ParamStore::new();
        let logits = [1.0, 0.0, -0.5];
        let probs = softmax_slice(&logits);
        let n = 100_000;

        let mut rng_g = RngStream::new(40, 1);
        let mut gumbel_counts = [0usize; 3];
        for _ in 0..n {
            let (i, _) = crate::sampling::gumbel_max(&mut rng_g, &logits).unwrap();
            gumbel_counts[i] += 1;
        }

        let mut rng_c = RngStream::new(40, 2);
        let mut cat_counts = [0usize; 3];
        let mut g = Graph::new(&s);
        let ln = g.constant(Tensor::vector(logits.to_vec())).unwrap();
        for _ in 0..n {
            let z = sample_categorical(&mut g, ln, &mut rng_c, 0).unwrap();
            cat_counts[z.index] += 1;
        }

        for i in 0..3 {
            let fg = gumbel_counts[i] as f64 / n as f64;
            let fc = cat_counts[i] as f64 / n as f64;
            assert!((fg - probs[i]).abs() < 0.01, "gumbel freq {fg} vs {}", probs[i]);
            assert!((fg - fc).abs() < 0.01, "gumbel {fg} vs categorical {fc}");
        }
    }

    #[test]
    fn straight_through_output_is_exactly_one_hot() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let mut g = Graph::new(&s);
            let logits = g.constant(Tensor::vector(vec![0.2, 0.9, -0.3])).unwrap();
            let draw = gumbel_softmax(&mut g, logits, 1.0, &mut rng, true).unwrap();
            let v = g.value(draw.node).unwrap();
            let ones = v.data().iter().filter(|x| **x == 1.0).count();
            let zeros = v.data().iter().filter(|x| **x == 0.0).count();
            assert_eq!((ones, zeros), (1, 2));
            assert_eq!(v.data()[draw.index], 1.0);
            assert_eq!(g.n_stochastic(), 0, "gumbel draws register no stochastic node");
        }
    }

    #[test]
    fn relaxed_output_sums_to_one_and_sharpens_at_low_temperature() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(13, 5);
        let mut sharp = 0;
        for _ in 0..100 {
            let mut g = Graph::new(&s);
            let logits = g.constant(Tensor::vector(vec![5.0, 0.0, 0.0])).unwrap();
            let draw = gumbel_softmax(&mut g, logits, 0.01, &mut rng, false).unwrap();
            let v = g.value(draw.node).unwrap();
            assert!((v.sum() - 1.0).abs() < 1e-12);
            if v.max_abs() > 0.99 {
                sharp += 1;
            }
        }
        assert!(sharp >= 99, "only {sharp}/100 draws were near one-hot");
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let s = ParamStore::new();
        let mut rng = RngStream::new(1, 1);
        let mut g = Graph::new(&s);
        let logits = g.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert!(gumbel_softmax(&mut g, logits, 0.0, &mut rng, false).is_err());
        assert!(gumbel_softmax(&mut g, logits, -1.0, &mut rng, true).is_err());
    }
}
