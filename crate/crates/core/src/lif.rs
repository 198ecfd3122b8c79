//! Clock-driven leaky integrate-and-fire layers.
//!
//! Each step a non-refractory neuron leaks toward its drive,
//! `h ← (1 − Δt/τ)·h + (Δt/τ)·v`, fires when `h ≥ h_th`, and is then reset
//! to zero and pinned there for the refractory period.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
pub struct LifParams<T> {
    /// Firing threshold of the membrane potential.
    pub h_th: T,
    /// Integration step in ms.
    pub dt: T,
    /// Refractory duration in ms.
    pub t_ref: T,
    /// Membrane decay constant in ms.
    pub tau: T,
}

impl<T: Real> Default for LifParams<T> {
    fn default() -> Self {
        Self {
            h_th: T::lit(0.4),
            dt: T::lit(0.25),
            t_ref: T::lit(1.0),
            tau: T::lit(20.0),
        }
    }
}

impl<T: Real> LifParams<T> {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.h_th, self.dt, self.t_ref, self.tau]
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("LIF parameters must be finite".into()));
        }
        if self.dt <= T::zero() || self.tau <= T::zero() {
            return Err(Error::InvalidParameter("LIF requires dt > 0 and tau > 0".into()));
        }
        if self.dt > self.tau {
            return Err(Error::InvalidParameter(format!(
                "LIF requires dt/tau in (0, 1], got {}",
                self.dt / self.tau
            )));
        }
        if self.t_ref < T::zero() {
            return Err(Error::InvalidParameter("LIF requires t_ref >= 0".into()));
        }
        if self.h_th <= T::zero() {
            return Err(Error::InvalidParameter("LIF requires h_th > 0".into()));
        }
        Ok(())
    }

    /// Leak factor `Δt/τ`.
    #[inline]
    pub fn leak(&self) -> T {
        self.dt / self.tau
    }

    /// Number of steps a neuron stays pinned after firing:
    /// `floor(t_ref/Δt)`, and zero once `Δt ≥ t_ref`.
    pub fn refractory_steps(&self) -> u32 {
        if self.t_ref <= self.dt {
            return 0;
        }
        let ratio = (self.t_ref / self.dt).as_f64();
        // absorbs representation error such as 0.3/0.1 = 2.999…
        (ratio + 1e-9).floor() as u32
    }

    /// Number of whole steps covering `duration_ms`.
    pub fn steps_for(&self, duration_ms: T) -> usize {
        (duration_ms / self.dt).as_f64().round().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub membrane: Vec<T>,
    pub refractory_remaining: Vec<u32>,
}

impl<T: Real> LayerState<T> {
    pub fn new(neurons: usize) -> Self {
        Self {
            membrane: vec![T::zero(); neurons],
            refractory_remaining: vec![0; neurons],
        }
    }

    pub fn len(&self) -> usize {
        self.membrane.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membrane.is_empty()
    }

    pub fn reset(&mut self) {
        self.membrane.iter_mut().for_each(|h| *h = T::zero());
        self.refractory_remaining.iter_mut().for_each(|r| *r = 0);
    }
}

/// Binary firing pattern of one layer at one step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpikeVector {
    spikes: Vec<bool>,
}

impl SpikeVector {
    pub fn silent(neurons: usize) -> Self {
        Self {
            spikes: vec![false; neurons],
        }
    }

    pub fn from_bools(spikes: Vec<bool>) -> Self {
        Self { spikes }
    }

    pub fn len(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.spikes
    }

    pub fn fired(&self) -> impl Iterator<Item = usize> + '_ {
        self.spikes
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.spikes.iter().filter(|&&s| s).count()
    }

    pub fn to_real<T: Real>(&self) -> Vec<T> {
        self.spikes
            .iter()
            .map(|&s| if s { T::one() } else { T::zero() })
            .collect()
    }
}

/// Presynaptic activity feeding a layer.
#[derive(Debug, Clone, Copy)]
pub enum Presyn<'a, T> {
    /// Static real-valued input injected every step.
    Real(&'a [T]),
    /// Spikes of the upstream layer, as set indices.
    Spikes { active: &'a [usize], len: usize },
}

impl<T: Real> Presyn<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            Presyn::Real(x) => x.len(),
            Presyn::Spikes { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Input drive `v = W·presyn + b`.
pub fn layer_drive<T: Real>(weights: &Matrix<T>, bias: &[T], presyn: Presyn<'_, T>) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); weights.rows()];
    layer_drive_into(weights, bias, presyn, &mut out)?;
    Ok(out)
}

pub fn layer_drive_into<T: Real>(
    weights: &Matrix<T>,
    bias: &[T],
    presyn: Presyn<'_, T>,
    out: &mut [T],
) -> Result<()> {
    ensure_len("presynaptic vector", weights.cols(), presyn.len())?;
    match presyn {
        Presyn::Real(x) => weights.affine_into(x, bias, out),
        Presyn::Spikes { active, .. } => weights.affine_binary_into(active, bias, out),
    }
}

/// One integration step, returning the successor state and the spikes.
pub fn integrate_step<T: Real>(
    state: &LayerState<T>,
    drive: &[T],
    params: &LifParams<T>,
) -> Result<(LayerState<T>, SpikeVector)> {
    let mut next = state.clone();
    let mut spikes = SpikeVector::silent(state.len());
    integrate_step_in_place(&mut next, drive, params, &mut spikes.spikes)?;
    Ok((next, spikes))
}

/// In-place form of [`integrate_step`]; `spikes` is overwritten.
pub fn integrate_step_in_place<T: Real>(
    state: &mut LayerState<T>,
    drive: &[T],
    params: &LifParams<T>,
    spikes: &mut [bool],
) -> Result<()> {
    let n = state.len();
    ensure_len("layer drive", n, drive.len())?;
    ensure_len("spike buffer", n, spikes.len())?;
    ensure_len("refractory counters", n, state.refractory_remaining.len())?;
    ensure_finite("layer drive", drive)?;

    let q = params.leak();
    let keep = T::one() - q;
    let refractory = params.refractory_steps();
    for i in 0..n {
        let counter = &mut state.refractory_remaining[i];
        let h = &mut state.membrane[i];
        if *counter > 0 {
            *counter -= 1;
            *h = T::zero();
            spikes[i] = false;
            continue;
        }
        let next = keep * *h + q * drive[i];
        if next >= params.h_th {
            spikes[i] = true;
            *h = T::zero();
            *counter = refractory;
        } else {
            spikes[i] = false;
            *h = next;
        }
    }
    Ok(())
}
