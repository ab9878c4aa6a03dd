//! Path Length Network: a fully connected map from
//! `(x_s, z_s, z_r, N_s, N_b)` to a strictly positive path length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{sigmoid, softplus, Layout, ParamVector, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::oracle::{PathSpec, Region, SourceLocation};

pub const INPUT_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Softplus => sigmoid(x),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputTransform {
    /// `ℓ = L_ref · softplus(y)`.
    ScaledSoftplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlnArchitecture {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output: OutputTransform,
}

impl Default for PlnArchitecture {
    /// Three tanh layers of width 64.
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Tanh,
            output: OutputTransform::ScaledSoftplus,
        }
    }
}

impl PlnArchitecture {
    /// One hidden layer of width 8 (57 parameters), small enough for dense
    /// Hessians.
    pub fn reduced() -> Self {
        Self {
            hidden: vec![8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument("PLN needs at least one hidden layer".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer of width zero".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` per layer including the scalar head.
    fn shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![INPUT_DIM];
        dims.extend(&self.hidden);
        dims.push(1);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(
            self.shapes()
                .iter()
                .enumerate()
                .flat_map(|(i, &(o, n))| {
                    [
                        Segment::new(format!("pln.layer{i}.weight"), o, n),
                        Segment::new(format!("pln.layer{i}.bias"), o, 1),
                    ]
                })
                .collect(),
        )
    }

    pub fn n_params(&self) -> usize {
        self.shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Affine map of the raw inputs to roughly `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub shift: [f64; INPUT_DIM],
    pub scale: [f64; INPUT_DIM],
}

impl InputNormalization {
    pub fn from_region(region: &Region, receiver_depth: f64) -> Self {
        Self {
            shift: [
                0.5 * (region.x_min + region.x_max),
                0.5 * (region.z_min + region.z_max),
                receiver_depth,
                0.5,
                0.5,
            ],
            scale: [
                0.5 * (region.x_max - region.x_min),
                0.5 * (region.z_max - region.z_min),
                100.0,
                0.5,
                0.5,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalization scales must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, raw: [f64; INPUT_DIM]) -> [f64; INPUT_DIM] {
        std::array::from_fn(|i| (raw[i] - self.shift[i]) / self.scale[i])
    }
}

/// Raw network input for one path.
pub fn path_input(p: &SourceLocation, receiver_depth: f64, path: PathSpec) -> [f64; INPUT_DIM] {
    [p.x, p.z, receiver_depth, path.surface as f64, path.bottom as f64]
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlnParams {
    pub arch: PlnArchitecture,
    pub norm: InputNormalization,
    /// Output scale `L_ref` in metres.
    pub length_scale: f64,
    pub weights: ParamVector,
}

/// Glorot-uniform weights, zero biases.
pub fn pln_init(
    arch: &PlnArchitecture,
    norm: InputNormalization,
    length_scale: f64,
    seed: u64,
) -> Result<PlnParams> {
    arch.validate()?;
    norm.validate()?;
    if !(length_scale > 0.0) {
        return Err(Error::InvalidArgument("length scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.n_params());
    for (o, i) in arch.shapes() {
        let limit = (6.0 / (o + i) as f64).sqrt();
        values.extend((0..o * i).map(|_| rng.random_range(-limit..limit)));
        values.extend(std::iter::repeat_n(0.0, o));
    }
    Ok(PlnParams {
        arch: arch.clone(),
        norm,
        length_scale,
        weights: ParamVector::new(arch.layout(), values)?,
    })
}

impl PlnParams {
    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass for one raw input.
    pub fn forward_raw(&self, raw: [f64; INPUT_DIM]) -> f64 {
        self.forward_normalized(&self.norm.apply(raw), &self.weights.values)
    }

    pub fn forward(&self, x_s: f64, z_s: f64, z_r: f64, n_s: f64, n_b: f64) -> f64 {
        self.forward_raw([x_s, z_s, z_r, n_s, n_b])
    }

    pub fn path_length(&self, p: &SourceLocation, receiver_depth: f64, path: PathSpec) -> f64 {
        self.forward_raw(path_input(p, receiver_depth, path))
    }

    fn forward_normalized(&self, input: &[f64], weights: &[f64]) -> f64 {
        let mut h = input.to_vec();
        let mut off = 0;
        let shapes = self.arch.shapes();
        for (layer, &(o, n)) in shapes.iter().enumerate() {
            let w = &weights[off..off + o * n];
            let b = &weights[off + o * n..off + o * n + o];
            off += o * n + o;
            let mut next: Vec<f64> = (0..o)
                .map(|r| b[r] + w[r * n..(r + 1) * n].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            if layer + 1 < shapes.len() {
                next.iter_mut().for_each(|v| *v = self.arch.activation.apply(*v));
            }
            h = next;
        }
        self.length_scale * softplus(h[0])
    }

    /// Path length for one raw input together with its gradient with
    /// respect to every weight, in layout order.
    pub fn length_with_grad(&self, raw: [f64; INPUT_DIM]) -> (f64, Vec<f64>) {
        let shapes = self.arch.shapes();
        let wv = &self.weights.values;
        let mut acts = vec![self.norm.apply(raw).to_vec()];
        let mut pre = Vec::with_capacity(shapes.len());
        let mut offs = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for (layer, &(o, n)) in shapes.iter().enumerate() {
            offs.push(off);
            let h = acts.last().expect("input layer");
            let z: Vec<f64> = (0..o)
                .map(|r| wv[off + o * n + r] + wv[off + r * n..off + (r + 1) * n].iter().zip(h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            off += o * n + o;
            if layer + 1 < shapes.len() {
                acts.push(z.iter().map(|&v| self.arch.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        let y = pre.last().expect("output layer")[0];
        let mut grad = vec![0.0; wv.len()];
        // d(length)/d(pre-activation) of the current layer
        let mut delta = vec![self.length_scale * sigmoid(y)];
        for layer in (0..shapes.len()).rev() {
            let (o, n) = shapes[layer];
            let off = offs[layer];
            let h = &acts[layer];
            for r in 0..o {
                for c in 0..n {
                    grad[off + r * n + c] = delta[r] * h[c];
                }
                grad[off + o * n + r] = delta[r];
            }
            if layer > 0 {
                let below = &pre[layer - 1];
                delta = (0..n)
                    .map(|c| {
                        let back: f64 = (0..o).map(|r| wv[off + r * n + c] * delta[r]).sum();
                        back * self.arch.activation.derivative(below[c])
                    })
                    .collect();
            }
        }
        (self.length_scale * softplus(y), grad)
    }

    /// Records the network on a tape. `weights` are the per-segment leaves in
    /// layout order; `inputs` is a `5 × n` matrix of normalized inputs.
    /// Returns a `1 × n` row of path lengths.
    pub fn record(&self, tape: &mut Tape, weights: &[Var], inputs: Var) -> Var {
        let n_layers = weights.len() / 2;
        let mut h = inputs;
        for layer in 0..n_layers {
            let z = tape.matmul(weights[2 * layer], h);
            let z = tape.add_col_bias(z, weights[2 * layer + 1]);
            h = if layer + 1 < n_layers {
                self.arch.activation.record(tape, z)
            } else {
                z
            };
        }
        let sp = tape.softplus(h);
        tape.scale(sp, self.length_scale)
    }

    /// Normalized `5 × n` input matrix (column per sample) as a constant.
    pub fn constant_inputs(&self, tape: &mut Tape, raw: &[[f64; INPUT_DIM]]) -> Var {
        let n = raw.len();
        let mut m = vec![0.0; INPUT_DIM * n];
        for (j, r) in raw.iter().enumerate() {
            let z = self.norm.apply(*r);
            for i in 0..INPUT_DIM {
                m[i * n + j] = z[i];
            }
        }
        tape.constant(m, INPUT_DIM, n)
    }

    /// Normalized input matrix for the three rays of one hypothetical source
    /// whose coordinates are tape nodes (1×1 each, in metres).
    pub fn source_inputs(&self, tape: &mut Tape, x: Var, z: Var, receiver_depth: f64, paths: &[PathSpec]) -> Var {
        let n = paths.len();
        let xs = tape.offset(x, -self.norm.shift[0]);
        let xs = tape.scale(xs, 1.0 / self.norm.scale[0]);
        let xs = tape.broadcast(xs, 1, n);
        let zs = tape.offset(z, -self.norm.shift[1]);
        let zs = tape.scale(zs, 1.0 / self.norm.scale[1]);
        let zs = tape.broadcast(zs, 1, n);
        let rest: Vec<f64> = (2..INPUT_DIM)
            .flat_map(|i| {
                paths.iter().map(move |path| {
                    let raw = [0.0, 0.0, receiver_depth, path.surface as f64, path.bottom as f64];
                    (raw[i] - self.norm.shift[i]) / self.norm.scale[i]
                })
            })
            .collect();
        let rest = tape.constant(rest, INPUT_DIM - 2, n);
        tape.concat_rows(&[xs, zs, rest])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{fd_check, grad, Segment};
    use crate::oracle::THREE_RAY;

    fn default_params(seed: u64) -> PlnParams {
        let norm = InputNormalization::from_region(&Region::default_training(), 120.0);
        pln_init(&PlnArchitecture::default(), norm, 500.0, seed).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(default_params(4), default_params(4));
        assert_ne!(default_params(4).weights, default_params(5).weights);
    }

    #[test]
    fn zero_hidden_layers_rejected() {
        let arch = PlnArchitecture {
            hidden: vec![],
            ..Default::default()
        };
        let norm = InputNormalization::from_region(&Region::default_training(), 120.0);
        assert!(pln_init(&arch, norm, 500.0, 0).is_err());
    }

    #[test]
    fn reduced_preset_is_small() {
        assert_eq!(PlnArchitecture::reduced().n_params(), 5 * 8 + 8 + 8 + 1);
        assert_eq!(PlnArchitecture::default().n_params(), 5 * 64 + 64 + 2 * (64 * 64 + 64) + 65);
    }

    #[test]
    fn initial_outputs_positive_and_bounded() {
        let pln = default_params(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let region = Region::default_training();
        for _ in 0..100 {
            let p = SourceLocation::new(
                rng.random_range(region.x_min..region.x_max),
                rng.random_range(region.z_min..region.z_max),
            );
            for path in THREE_RAY {
                let l = pln.path_length(&p, 120.0, path);
                assert!(l > 0.0 && l < 10.0 * pln.length_scale, "{l}");
            }
        }
    }

    #[test]
    fn length_gradient_matches_tape() {
        for activation in [Activation::Tanh, Activation::Softplus] {
            let arch = PlnArchitecture {
                hidden: vec![6, 5],
                activation,
                output: OutputTransform::ScaledSoftplus,
            };
            let region = Region::default_training();
            let pln = pln_init(&arch, InputNormalization::from_region(&region, 120.0), 500.0, 4).unwrap();
            let raw = [640.0, 33.0, 120.0, 1.0, 0.0];
            let (l, g) = pln.length_with_grad(raw);
            let (l2, g2) = grad(
                |tape: &mut Tape, w: &[Var]| {
                    let inp = pln.constant_inputs(tape, &[raw]);
                    let out = pln.record(tape, w, inp);
                    Ok(tape.sum(out))
                },
                &pln.weights,
            )
            .unwrap();
            assert!((l - l2).abs() <= 1e-12 * l2);
            for (a, b) in g.iter().zip(&g2.values) {
                assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tape_matches_plain_forward() {
        let pln = default_params(2);
        let p = SourceLocation::new(610.0, 20.0);
        let raw: Vec<_> = THREE_RAY.iter().map(|&path| path_input(&p, 120.0, path)).collect();
        let mut tape = Tape::new();
        let w = pln.weights.record(&mut tape);
        let inp = pln.constant_inputs(&mut tape, &raw);
        let out = pln.record(&mut tape, &w, inp);
        for (j, r) in raw.iter().enumerate() {
            let plain = pln.forward_raw(*r);
            assert!((tape.value(out)[j] - plain).abs() <= 1e-12 * plain);
        }
    }

    #[test]
    fn source_gradient_matches_fd() {
        let pln = default_params(3);
        let at = ParamVector::new(
            crate::diff::Layout::new(vec![Segment::new("x", 1, 1), Segment::new("z", 1, 1)]),
            vec![555.0, 37.0],
        )
        .unwrap();
        for (k, path) in THREE_RAY.iter().enumerate() {
            let f = |tape: &mut Tape, v: &[Var]| {
                let w: Vec<Var> = pln
                    .weights
                    .layout
                    .segments
                    .iter()
                    .scan(0, |off, s| {
                        let c = tape.constant(pln.weights.values[*off..*off + s.len()].to_vec(), s.rows, s.cols);
                        *off += s.len();
                        Some(c)
                    })
                    .collect();
                let inp = pln.source_inputs(tape, v[0], v[1], 120.0, &THREE_RAY);
                let out = pln.record(tape, &w, inp);
                let sel = tape.constant(
                    (0..3).map(|j| if j == k { 1.0 } else { 0.0 }).collect(),
                    1,
                    3,
                );
                let m = tape.mul(out, sel);
                Ok(tape.sum(m))
            };
            let report = fd_check(f, &at, 1e-5, 0, 0).unwrap();
            assert!(report.max_rel_error <= 1e-5, "{path:?}: {report:?}");
            let (v, _) = grad(f, &at).unwrap();
            assert!((v - pln.path_length(&SourceLocation::new(555.0, 37.0), 120.0, *path)).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_always_positive(x in -1e4f64..1e4, z in -1e3f64..1e3, zr in 0.0f64..300.0,
                                      ns in 0.0f64..1.0, nb in 0.0f64..1.0, seed in 0u64..20) {
                let pln = default_params(seed);
                prop_assert!(pln.forward(x, z, zr, ns, nb) > 0.0);
            }
        }
    }
}
