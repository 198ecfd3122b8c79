//! Network shapes and statistical initialization of forward weights, biases
//! and the fixed random feedback matrices.
//!
//! Forward weights are drawn uniformly around a desired mean with a desired
//! second moment, both chosen so that the drive reaching each layer has mean
//! `v_mean` and second moment `v_second`. Feedback matrices are products of
//! fresh random factors with the same per-layer statistics, each factor
//! shaped like the transpose of the forward matrix it stands in for and
//! scaled by `gamma`.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkTopology {
    pub layer_dims: Vec<usize>,
    pub seed: u64,
}

impl NetworkTopology {
    pub fn new(layer_dims: Vec<usize>, seed: u64) -> Result<Self> {
        let t = Self { layer_dims, seed };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "topology needs at least an input and an output layer".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidParameter("layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct InitStats<T> {
    /// Desired mean of the drive into each layer.
    pub v_mean: T,
    /// Desired second moment of that drive.
    pub v_second: T,
    /// Slope constant relating drive to presynaptic activity.
    pub alpha: T,
    pub bias_init: T,
    /// Scale of each factor in the feedback matrices.
    pub gamma: T,
}

impl<T: Real> Default for InitStats<T> {
    fn default() -> Self {
        Self {
            v_mean: T::lit(8.0),
            v_second: T::lit(164.0),
            alpha: T::lit(0.066),
            bias_init: T::lit(0.8),
            gamma: T::lit(0.0338),
        }
    }
}

impl<T: Real> InitStats<T> {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.v_mean, self.v_second, self.alpha, self.bias_init, self.gamma]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("init statistics must be finite".into()));
        }
        if self.v_mean == T::zero() {
            return Err(Error::InvalidParameter("v_mean must be nonzero".into()));
        }
        if self.v_second <= T::zero() {
            return Err(Error::InvalidParameter("v_second must be positive".into()));
        }
        if self.alpha <= T::zero() {
            return Err(Error::InvalidParameter("alpha must be positive".into()));
        }
        if self.gamma < T::zero() {
            return Err(Error::InvalidParameter("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Target moments of one weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WeightStats<T> {
    pub mean: T,
    pub second_moment: T,
    pub std: T,
}

impl<T: Real> WeightStats<T> {
    /// Moments for a layer with `fan_in` presynaptic neurons.
    pub fn desired(layer: usize, fan_in: usize, stats: &InitStats<T>) -> Result<Self> {
        let n = T::from_usize(fan_in).expect("fan-in fits the scalar type");
        let InitStats {
            v_mean: v,
            v_second: vv,
            alpha: a,
            bias_init: b,
            ..
        } = *stats;
        let two = T::lit(2.0);
        let mean = (v - b) / (a * n * v);
        let second_moment = (vv + a * a * (n - n * n) * mean * mean * v * v
            - two * b * a * n * v * mean
            - b * b)
            / (a * a * n * vv);
        let var = second_moment - mean * mean;
        if !(var >= T::zero()) {
            return Err(Error::DegenerateInit {
                layer,
                second_moment: second_moment.as_f64(),
                mean_sq: (mean * mean).as_f64(),
            });
        }
        Ok(Self {
            mean,
            second_moment,
            std: var.sqrt(),
        })
    }

    /// One draw of `mean + 2√3·std·(u − 0.5)`, `u ~ U[0, 1)`.
    #[inline]
    pub fn sample(&self, rng: &mut impl Rng) -> T {
        let u: f64 = rng.random();
        let half_width = T::lit(2.0 * 3f64.sqrt()) * self.std;
        self.mean + half_width * (T::lit(u) - T::lit(0.5))
    }
}

/// Weights, biases and the moments they were drawn with, per layer.
pub type InitialWeights<T> = (Vec<Matrix<T>>, Vec<Vec<T>>, Vec<WeightStats<T>>);

/// Samples every forward weight matrix and bias vector.
pub fn init_weights<T: Real>(topology: &NetworkTopology, stats: &InitStats<T>) -> Result<InitialWeights<T>> {
    topology.validate()?;
    stats.validate()?;
    let dims = &topology.layer_dims;
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    let mut moments = Vec::with_capacity(dims.len() - 1);
    for (layer, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let ws = WeightStats::desired(layer, fan_in, stats)?;
        let mut rng = stream_rng(topology.seed, Stream::Weights, layer as u64);
        weights.push(Matrix::from_fn(fan_out, fan_in, |_, _| ws.sample(&mut rng)));
        biases.push(vec![stats.bias_init; fan_out]);
        moments.push(ws);
    }
    Ok((weights, biases, moments))
}

/// Fixed feedback matrices for every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback<T> {
    /// `chain[h]` maps the error of hidden layer `h + 1` (or the output) back
    /// to hidden layer `h`; shape `N_h × N_{h+1}`.
    pub chain: Vec<Matrix<T>>,
    /// `direct[h]` maps the output error straight to hidden layer `h`; it is
    /// the product of the chain factors downstream of `h`.
    pub direct: Vec<Matrix<T>>,
}

/// Draws the feedback factors. `moments[n]` are the statistics of forward
/// layer `n`; the factor for hidden layer `h` reuses those of layer `h + 1`.
pub fn init_feedback<T: Real>(
    moments: &[WeightStats<T>],
    topology: &NetworkTopology,
    gamma: T,
) -> Result<Feedback<T>> {
    topology.validate()?;
    let dims = &topology.layer_dims;
    crate::error::ensure_len("weight statistics", dims.len() - 1, moments.len())?;
    let hidden = dims.len() - 2;
    let mut chain = Vec::with_capacity(hidden);
    for h in 0..hidden {
        let ws = &moments[h + 1];
        let mut rng = stream_rng(topology.seed, Stream::Feedback, (h + 1) as u64);
        chain.push(Matrix::from_fn(dims[h + 1], dims[h + 2], |_, _| {
            gamma * ws.sample(&mut rng)
        }));
    }
    let mut direct: Vec<Matrix<T>> = Vec::with_capacity(hidden);
    for h in (0..hidden).rev() {
        let b = match direct.last() {
            None => chain[h].clone(),
            Some(downstream) => chain[h].matmul(downstream)?,
        };
        direct.push(b);
    }
    direct.reverse();
    Ok(Feedback { chain, direct })
}

/// Weights, biases and feedback of a multilayer spiking network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState<T> {
    pub dims: Vec<usize>,
    /// `weights[n]` has shape `dims[n + 1] × dims[n]`.
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
    pub moments: Vec<WeightStats<T>>,
    pub feedback: Feedback<T>,
}

impl<T: Real> NetworkState<T> {
    pub fn initialize(topology: &NetworkTopology, stats: &InitStats<T>) -> Result<Self> {
        let (weights, biases, moments) = init_weights(topology, stats)?;
        let feedback = init_feedback(&moments, topology, stats.gamma)?;
        Ok(Self {
            dims: topology.layer_dims.clone(),
            weights,
            biases,
            moments,
            feedback,
        })
    }

    pub fn num_weight_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Checksum of all feedback matrices.
    pub fn feedback_checksum(&self) -> u64 {
        self.feedback
            .chain
            .iter()
            .chain(&self.feedback.direct)
            .fold(0u64, |acc, m| acc.rotate_left(7) ^ m.checksum())
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.dims.len();
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if l < 2 || self.weights.len() != l - 1 || self.biases.len() != l - 1 {
            return bad("layer count mismatch".into());
        }
        for (n, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.shape() != (self.dims[n + 1], self.dims[n]) || b.len() != self.dims[n + 1] {
                return bad(format!("weight layer {n} has inconsistent shape"));
            }
        }
        if self.feedback.chain.len() != l - 2 || self.feedback.direct.len() != l - 2 {
            return bad("feedback count mismatch".into());
        }
        for h in 0..l - 2 {
            if self.feedback.chain[h].shape() != (self.dims[h + 1], self.dims[h + 2]) {
                return bad(format!("feedback chain factor {h} has inconsistent shape"));
            }
            if self.feedback.direct[h].shape() != (self.dims[h + 1], self.dims[l - 1]) {
                return bad(format!("direct feedback {h} has inconsistent shape"));
            }
        }
        Ok(())
    }

    /// Writes the checkpoint format described in the README: magic
    /// `ADFASNN1`, a layer-count/dims header, then row-major little-endian
    /// `f64` blocks.
    pub fn write_checkpoint(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.dims.len() as u32)?;
        for &d in &self.dims {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        let mut put = |xs: &[T]| -> Result<()> {
            for x in xs {
                w.write_f64::<LittleEndian>(x.as_f64())?;
            }
            Ok(())
        };
        for ((m, b), s) in self.weights.iter().zip(&self.biases).zip(&self.moments) {
            put(m.as_slice())?;
            put(b)?;
            put(&[s.mean, s.second_moment, s.std])?;
        }
        for (c, d) in self.feedback.chain.iter().zip(&self.feedback.direct) {
            put(c.as_slice())?;
            put(d.as_slice())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Config("not a network checkpoint (bad magic)".into()));
        }
        let l = r.read_u32::<LittleEndian>()? as usize;
        if !(2..=64).contains(&l) {
            return Err(Error::Config(format!("implausible layer count {l}")));
        }
        let dims = (0..l)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut take = |n: usize| -> Result<Vec<T>> {
            (0..n)
                .map(|_| Ok(T::lit(r.read_f64::<LittleEndian>()?)))
                .collect()
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut moments = Vec::new();
        for n in 0..l - 1 {
            let (rows, cols) = (dims[n + 1], dims[n]);
            weights.push(Matrix::from_row_major(rows, cols, take(rows * cols)?)?);
            biases.push(take(rows)?);
            let s = take(3)?;
            moments.push(WeightStats {
                mean: s[0],
                second_moment: s[1],
                std: s[2],
            });
        }
        let mut chain = Vec::new();
        let mut direct = Vec::new();
        for h in 0..l - 2 {
            let (rows, cols) = (dims[h + 1], dims[h + 2]);
            chain.push(Matrix::from_row_major(rows, cols, take(rows * cols)?)?);
            let cols = dims[l - 1];
            direct.push(Matrix::from_row_major(rows, cols, take(rows * cols)?)?);
        }
        let net = Self {
            dims,
            weights,
            biases,
            moments,
            feedback: Feedback { chain, direct },
        };
        net.validate()?;
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADFASNN1";

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(dims: &[usize]) -> NetworkTopology {
        NetworkTopology::new(dims.to_vec(), 11).unwrap()
    }

    #[test]
    fn desired_mean_for_thousand_inputs() {
        let s = InitStats::<f64>::default();
        let ws = WeightStats::desired(1, 1000, &s).unwrap();
        // (8 − 0.8) / (0.066 · 1000 · 8) = 7.2 / 528
        assert!((ws.mean - 7.2 / 528.0).abs() < 1e-15);
        assert!((ws.mean - 0.013636).abs() < 1e-6);
        // second moment evaluated independently with the printed constants
        let (n, a, v, vv, m) = (1000.0f64, 0.066f64, 8.0f64, 164.0f64, 7.2 / 528.0);
        let second = (vv + a * a * (n - n * n) * m * m * v * v - 1.6 * a * n * v * m - 0.64)
            / (a * a * n * vv);
        assert!((ws.second_moment - second).abs() < 1e-14);
        assert!((ws.std - (second - m * m).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn degenerate_statistics_are_rejected() {
        let s = InitStats::<f64> {
            v_second: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            WeightStats::desired(0, 100, &s),
            Err(Error::DegenerateInit { layer: 0, .. })
        ));
    }

    #[test]
    fn shapes_and_biases() {
        let net = NetworkState::<f64>::initialize(&topo(&[784, 1000, 10]), &Default::default())
            .unwrap();
        assert_eq!(net.weights[0].shape(), (1000, 784));
        assert_eq!(net.weights[1].shape(), (10, 1000));
        assert!(net.biases.iter().flatten().all(|&b| b == 0.8));
        assert_eq!(net.feedback.direct.len(), net.weights.len() - 1);
        assert_eq!(net.feedback.direct[0].shape(), (1000, 10));
        assert_eq!(net.feedback.direct[0], net.feedback.chain[0]);
        net.validate().unwrap();
    }

    #[test]
    fn deeper_feedback_chains_compose_to_output_dimension() {
        let net = NetworkState::<f64>::initialize(&topo(&[20, 15, 12, 7, 4]), &Default::default())
            .unwrap();
        for (h, b) in net.feedback.direct.iter().enumerate() {
            assert_eq!(b.shape(), (net.dims[h + 1], 4));
            let mut out = vec![0.0; b.rows()];
            b.matvec_into(&[1.0, -1.0, 0.5, 0.0], &mut out);
            assert_eq!(out.len(), net.dims[h + 1]);
        }
        let c = &net.feedback.chain;
        let expected = c[0].matmul(&c[1].matmul(&c[2]).unwrap()).unwrap();
        assert_eq!(net.feedback.direct[0], expected);
        let left = c[0].matmul(&c[1]).unwrap().matmul(&c[2]).unwrap();
        for (a, b) in left.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn feedback_factor_has_scaled_downstream_statistics() {
        let s = InitStats::<f64>::default();
        let net = NetworkState::<f64>::initialize(&topo(&[50, 1000, 200]), &s).unwrap();
        let ws = &net.moments[1];
        let b = net.feedback.direct[0].as_slice();
        let n = b.len() as f64;
        let mean = b.iter().sum::<f64>() / n;
        let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let (want_mean, want_std) = (s.gamma * ws.mean, s.gamma * ws.std);
        assert!((mean - want_mean).abs() < 3.0 * want_std / n.sqrt());
        assert!((var.sqrt() / want_std - 1.0).abs() < 0.05);
    }

    #[test]
    fn zero_gamma_gives_zero_feedback() {
        let s = InitStats::<f64> {
            gamma: 0.0,
            ..Default::default()
        };
        let net = NetworkState::<f64>::initialize(&topo(&[30, 20, 10, 5]), &s).unwrap();
        for m in net.feedback.direct.iter().chain(&net.feedback.chain) {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn same_seed_is_bit_identical_and_layers_are_independent() {
        let s = InitStats::<f64>::default();
        let a = NetworkState::<f64>::initialize(&topo(&[40, 30, 10]), &s).unwrap();
        let b = NetworkState::<f64>::initialize(&topo(&[40, 30, 10]), &s).unwrap();
        assert_eq!(a, b);
        // appending a layer leaves the first weight matrix untouched
        let c = NetworkState::<f64>::initialize(&topo(&[40, 30, 10, 10]), &s).unwrap();
        assert_eq!(a.weights[0], c.weights[0]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = NetworkState::<f64>::initialize(&topo(&[9, 7, 5, 3]), &Default::default())
            .unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let back = NetworkState::<f64>::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(net, back);
        assert!(NetworkState::<f64>::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(NetworkState::<f64>::read_checkpoint(&b"NOTACKPT"[..]).is_err());
    }

    #[test]
    fn invalid_topologies() {
        assert!(NetworkTopology::new(vec![10], 0).is_err());
        assert!(NetworkTopology::new(vec![10, 0, 3], 0).is_err());
    }
}
