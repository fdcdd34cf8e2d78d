//! Named parameter tensors, the differentiable-objective contract, a
//! finite-difference gradient checker, and Adam.
//!
//! Adjoints are hand-derived per operation (see `field` and `losses`); an
//! [`Objective`] composes them into one scalar and its gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{LatentCode, NoiseMap, PriorDecoder};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }
}

/// Ordered, uniquely-named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, t: Tensor) -> Result<Self> {
        self.insert(name, t)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape == y.shape)
    }

    /// `self += scale * other`, matching by name.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (name, t) in &mut self.entries {
            if let Some(o) = other.get(name) {
                t.data.iter_mut().zip(&o.data).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    /// Bitwise hash of all values, used to assert that frozen tensors stay put.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (n, t) in &self.entries {
            for b in n.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for v in &t.data {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

pub const THETA_PREFIX: &str = "theta.";
pub const LATENT_PREFIX: &str = "w.";
pub const NOISE_NAME: &str = "n";

impl PriorDecoder {
    pub fn to_params(&self, out: &mut ParamSet) -> Result<()> {
        for (l, level) in self.levels.iter().enumerate() {
            let r = level.resolution;
            out.insert(
                format!("{THETA_PREFIX}grid{l}"),
                Tensor::new(vec![level.bases, r, r, r, level.channels], level.data.clone()),
            )?;
        }
        let d = &self.decoder;
        let h = d.b1.len();
        out.insert(format!("{THETA_PREFIX}w1"), Tensor::new(vec![h, d.inputs], d.w1.clone()))?;
        out.insert(format!("{THETA_PREFIX}b1"), Tensor::new(vec![h], d.b1.clone()))?;
        out.insert(format!("{THETA_PREFIX}w2"), Tensor::new(vec![d.b2.len(), h], d.w2.clone()))?;
        out.insert(format!("{THETA_PREFIX}b2"), Tensor::new(vec![d.b2.len()], d.b2.clone()))?;
        out.insert(format!("{THETA_PREFIX}noise_gain"), Tensor::scalar(self.noise_gain))?;
        Ok(())
    }

    /// Overwrites any parameters present in `p`; absent names are left alone.
    pub fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        let copy = |dst: &mut Vec<f64>, name: String| -> Result<()> {
            if let Some(t) = p.get(&name) {
                if t.data.len() != dst.len() {
                    return Err(Error::ShapeMismatch(format!("parameter `{name}`")));
                }
                dst.copy_from_slice(&t.data);
            }
            Ok(())
        };
        for (l, level) in self.levels.iter_mut().enumerate() {
            copy(&mut level.data, format!("{THETA_PREFIX}grid{l}"))?;
        }
        let d = &mut self.decoder;
        copy(&mut d.w1, format!("{THETA_PREFIX}w1"))?;
        copy(&mut d.b1, format!("{THETA_PREFIX}b1"))?;
        copy(&mut d.w2, format!("{THETA_PREFIX}w2"))?;
        copy(&mut d.b2, format!("{THETA_PREFIX}b2"))?;
        if let Some(t) = p.get(&format!("{THETA_PREFIX}noise_gain")) {
            self.noise_gain = t.data[0];
        }
        Ok(())
    }
}

impl LatentCode {
    pub fn to_params(&self, out: &mut ParamSet) -> Result<()> {
        for (l, v) in self.levels.iter().enumerate() {
            out.insert(format!("{LATENT_PREFIX}level{l}"), Tensor::new(vec![v.len()], v.clone()))?;
        }
        Ok(())
    }

    pub fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        for (l, v) in self.levels.iter_mut().enumerate() {
            let name = format!("{LATENT_PREFIX}level{l}");
            if let Some(t) = p.get(&name) {
                if t.data.len() != v.len() {
                    return Err(Error::ShapeMismatch(format!("parameter `{name}`")));
                }
                v.copy_from_slice(&t.data);
            }
        }
        Ok(())
    }
}

impl NoiseMap {
    pub fn to_params(&self, out: &mut ParamSet) -> Result<()> {
        out.insert(
            NOISE_NAME,
            Tensor::new(vec![self.map.height, self.map.width], self.map.data.clone()),
        )
    }

    pub fn load_params(&mut self, p: &ParamSet) -> Result<()> {
        if let Some(t) = p.get(NOISE_NAME) {
            if t.data.len() != self.map.data.len() {
                return Err(Error::ShapeMismatch("noise map".into()));
            }
            self.map.data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

/// Converts an image to a tensor `[height, width, channels]`.
pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(vec![img.height, img.width, img.channels], img.data.clone())
}

pub fn tensor_image(t: &Tensor) -> Result<Image> {
    match t.shape.as_slice() {
        &[h, w, c] => Image::from_vec(w, h, c, t.data.clone()),
        &[h, w] => Image::from_vec(w, h, 1, t.data.clone()),
        s => Err(Error::ShapeMismatch(format!("tensor of shape {s:?} is not an image"))),
    }
}

/// A scalar function of named parameters with an exact gradient.
pub trait Objective {
    /// Returns the loss and, when `with_grad`, its gradient keyed like
    /// `params`. Parameters that do not influence the loss get zeros.
    fn evaluate(&self, params: &ParamSet, with_grad: bool) -> Result<(f64, Option<ParamSet>)>;

    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.evaluate(params, false)?.0)
    }
}

impl<F> Objective for F
where
    F: Fn(&ParamSet, bool) -> Result<(f64, Option<ParamSet>)>,
{
    fn evaluate(&self, params: &ParamSet, with_grad: bool) -> Result<(f64, Option<ParamSet>)> {
        self(params, with_grad)
    }
}

/// Checks that a named loss term is finite.
pub fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            term: term.to_string(),
            value,
        })
    }
}

/// Reverse pass of `loss` with respect to `params`.
pub fn backward(loss: &dyn Objective, params: &ParamSet) -> Result<(f64, ParamSet)> {
    let (value, grad) = loss.evaluate(params, true)?;
    ensure_finite("loss", value)?;
    let grad = grad.ok_or_else(|| Error::InvalidArgument("objective returned no gradient".into()))?;
    if !grad.same_layout(params) {
        return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    if let Some((name, _)) = grad.iter().find(|(_, t)| !t.data.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            term: format!("gradient of {name}"),
            value: f64::NAN,
        });
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Per-tensor maximum relative error of analytic against central-difference
/// gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

pub const GRAD_CHECK_MIN_COORDS: usize = 64;
/// Central differences at `epsilon = 1e-6` carry roughly 1e-10 of rounding
/// noise, so components smaller than this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Central-difference check on a random subsample of at least 64 coordinates
/// per tensor (all of them when smaller). The relative error uses the
/// denominator `max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(loss: &dyn Objective, params: &ParamSet, epsilon: f64, seed: u64) -> Result<GradReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (_, analytic) = backward(loss, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for (ti, (name, t)) in params.iter().enumerate() {
        let n = t.data.len();
        let picks: Vec<usize> = if n <= GRAD_CHECK_MIN_COORDS {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, GRAD_CHECK_MIN_COORDS).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = TensorReport {
            name: name.to_string(),
            checked: picks.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let grad = &analytic.entries[ti].1.data;
        for &i in &picks {
            let orig = t.data[i];
            probe.entries[ti].1.data[i] = orig + epsilon;
            let up = loss.value(&probe)?;
            probe.entries[ti].1.data[i] = orig - epsilon;
            let down = loss.value(&probe)?;
            probe.entries[ti].1.data[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        tensors.push(report);
    }
    Ok(GradReport { epsilon, tensors })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied to every parameter.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam over a [`ParamSet`]; moments are keyed by parameter position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParamSet,
    v: ParamSet,
    step: u32,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet) -> Result<()> {
        if !params.same_layout(grad) || !params.same_layout(&self.m) {
            return Err(Error::ShapeMismatch("Adam: parameter layout changed".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .entries
            .iter_mut()
            .zip(&grad.entries)
            .zip(self.m.entries.iter_mut().zip(self.v.entries.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + eps) + weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(p: &ParamSet, with_grad: bool) -> Result<(f64, Option<ParamSet>)> {
        let w = &p.get("w").unwrap().data;
        let v = w.iter().map(|x| x * x).sum();
        let g = with_grad.then(|| {
            let mut g = p.zeros_like();
            g.get_mut("w").unwrap().data = w.iter().map(|x| 2.0 * x).collect();
            g
        });
        Ok((v, g))
    }

    #[test]
    fn quadratic_gradient_and_untouched_param() {
        let p = ParamSet::new()
            .with("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]))
            .unwrap()
            .with("unused", Tensor::new(vec![2], vec![4.0, 5.0]))
            .unwrap();
        let (v, g) = backward(&quadratic, &p).unwrap();
        assert_eq!(v, 5.25);
        assert_eq!(g.get("w").unwrap().data, vec![2.0, -4.0, 1.0]);
        assert_eq!(g.get("unused").unwrap().data, vec![0.0, 0.0]);
        let r = grad_check(&quadratic, &p, 1e-3, 0).unwrap();
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn linear_loss_checks_to_machine_precision() {
        let coeffs: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let c2 = coeffs.clone();
        let f = move |p: &ParamSet, wg: bool| -> Result<(f64, Option<ParamSet>)> {
            let x = &p.get("x").unwrap().data;
            let v = x.iter().zip(&c2).map(|(a, b)| a * b).sum();
            Ok((v, wg.then(|| ParamSet::new().with("x", Tensor::new(vec![100], c2.clone())).unwrap())))
        };
        let p = ParamSet::new().with("x", Tensor::new(vec![100], vec![0.3; 100])).unwrap();
        let r = grad_check(&f, &p, 1e-3, 1).unwrap();
        assert_eq!(r.tensors[0].checked, 64);
        assert!(r.max_rel_error() < 1e-8, "{r:?}");
        let _ = coeffs;
    }

    #[test]
    fn non_finite_loss_is_named() {
        let f = |_: &ParamSet, _: bool| -> Result<(f64, Option<ParamSet>)> { ensure_finite("depth", f64::NAN).map(|v| (v, None)) };
        let p = ParamSet::new();
        match backward(&f, &p) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "depth"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = ParamSet::new().with("w", Tensor::new(vec![2], vec![3.0, -2.0])).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..500 {
            let (_, g) = backward(&quadratic, &p).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("w").unwrap().data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn model_params_roundtrip() {
        let shape = crate::field::FieldShape {
            levels: vec![(3, 2)],
            channels: 2,
        };
        let m = PriorDecoder::random(&shape, 1).unwrap();
        let mut p = ParamSet::new();
        m.to_params(&mut p).unwrap();
        let mut z = m.zeros_like();
        z.load_params(&p).unwrap();
        assert_eq!(z, m);
        assert!(p.insert("theta.w1", Tensor::scalar(0.0)).is_err());
    }
}
