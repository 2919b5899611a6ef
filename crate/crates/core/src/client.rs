//! One round of local training on a client.
//!
//! Three routines share the same inputs and the same batch stream:
//! plain local SGD (FedAvg), the IGFL client correction, and SCAFFOLD
//! (control variates, option II update).

use crate::error::{invalid, Error, Result};
use crate::models::{Batch, LossModel};
use crate::params::ParamVector;
use crate::scalar::Scalar;

/// Memory a client carries between the rounds it participates in.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState<T> {
    /// Delta returned at the client's most recent participation.
    pub last_update: ParamVector<T>,
    /// SCAFFOLD control variate; stays zero for other algorithms.
    pub control_variate: ParamVector<T>,
    pub last_round_seen: Option<usize>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            last_update: ParamVector::zeros(num_params),
            control_variate: ParamVector::zeros(num_params),
            last_round_seen: None,
        }
    }
}

/// What the server hands a client at the start of a round, plus the client's
/// batch schedule. The number of local steps is `batches.len()`.
#[derive(Clone, Copy, Debug)]
pub struct ClientRoundInput<'a, T> {
    pub global_params: &'a ParamVector<T>,
    /// Global step applied in the previous round (zero in round 0).
    pub global_delta: &'a ParamVector<T>,
    /// Number of clients sampled this round.
    pub sample_count: usize,
    pub lr: T,
    pub batches: &'a [Batch<T>],
    /// Round and client index, for error context only.
    pub round: usize,
    pub client: usize,
}

impl<T: Scalar> ClientRoundInput<'_, T> {
    pub fn local_steps(&self) -> usize {
        self.batches.len()
    }

    fn validate(&self, model: &LossModel<T>) -> Result<()> {
        if self.batches.is_empty() {
            return Err(Error::Empty("local batch schedule"));
        }
        if self.sample_count == 0 {
            return Err(invalid("sample_count", "must be >= 1"));
        }
        if !(self.lr >= T::zero()) || !self.lr.is_finite() {
            return Err(invalid("lr", "must be finite and >= 0"));
        }
        let n = model.num_params();
        for v in [self.global_params, self.global_delta] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    left: v.len(),
                    right: n,
                });
            }
        }
        Ok(())
    }

    fn step_gradient(
        &self,
        model: &LossModel<T>,
        w: &ParamVector<T>,
        batch: &Batch<T>,
    ) -> Result<ParamVector<T>> {
        match model.loss_and_gradient(w, batch) {
            Ok((_, g)) if g.is_finite() => Ok(g),
            Ok(_) => Err(self.diverged("gradient")),
            Err(Error::NonFinite(_)) => Err(self.diverged("loss")),
            Err(e) => Err(e),
        }
    }

    fn diverged(&self, what: &'static str) -> Error {
        Error::Diverged {
            round: self.round,
            client: self.client,
            what,
        }
    }

    fn finish(&self, w: &ParamVector<T>) -> Result<ParamVector<T>> {
        if !w.is_finite() {
            return Err(self.diverged("parameters"));
        }
        w.sub(self.global_params)
    }
}

fn check_len<T: Scalar>(v: &ParamVector<T>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            left: v.len(),
            right: n,
        });
    }
    Ok(())
}

/// Local SGD: `w <- w - lr * g(w)` over the batch schedule, starting from
/// the global parameters. Returns the final iterate minus the start.
pub fn local_sgd_round<T: Scalar>(
    input: &ClientRoundInput<'_, T>,
    model: &LossModel<T>,
) -> Result<ParamVector<T>> {
    input.validate(model)?;
    let mut w = input.global_params.clone();
    for batch in input.batches {
        let g = input.step_gradient(model, &w, batch)?;
        w.axpy(-input.lr, &g);
    }
    input.finish(&w)
}

/// Whether the IGFL client applies its group-behaviour correction.
/// `Off` exists so tests can reduce the routine to local SGD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Correction {
    #[default]
    On,
    Off,
}

/// IGFL client round. Each local step moves by the individual step
/// `d_i = -lr * g(w)` plus the correction
///
/// ```text
/// d_g = (d_i - last_update / T) / |S| + global_delta / T
/// ```
///
/// so the previous round's group step is spread over the local steps and the
/// client's own previous step is discounted. Returns `w_T - global_params`;
/// the caller stores it as the new `last_update`.
pub fn igfl_client_round<T: Scalar>(
    input: &ClientRoundInput<'_, T>,
    state: &ClientState<T>,
    model: &LossModel<T>,
    correction: Correction,
) -> Result<ParamVector<T>> {
    input.validate(model)?;
    check_len(&state.last_update, model.num_params())?;
    let inv_t = T::one() / T::of_usize(input.local_steps());
    let inv_s = T::one() / T::of_usize(input.sample_count);
    let own = state.last_update.scaled(inv_t);
    let group = input.global_delta.scaled(inv_t);
    let mut w = input.global_params.clone();
    for batch in input.batches {
        let g = input.step_gradient(model, &w, batch)?;
        let w = w.as_mut_slice();
        match correction {
            Correction::Off => {
                for (wk, &gk) in w.iter_mut().zip(g.iter()) {
                    *wk = *wk + -(input.lr * gk);
                }
            }
            Correction::On => {
                for (k, wk) in w.iter_mut().enumerate() {
                    let d_i = -(input.lr * g[k]);
                    let d_g = inv_s * (d_i - own[k]) + group[k];
                    *wk = *wk + d_i + d_g;
                }
            }
        }
    }
    input.finish(&w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaffoldUpdate<T> {
    pub delta: ParamVector<T>,
    /// `c_i_new - c_i_old`, which the server averages into its control.
    pub control_delta: ParamVector<T>,
    pub new_control: ParamVector<T>,
}

/// SCAFFOLD client round: steps `w <- w - lr * (g(w) - c_i + c)`, then
/// `c_i <- c_i - c + (w_start - w_end) / (T * lr)`.
pub fn scaffold_client_round<T: Scalar>(
    input: &ClientRoundInput<'_, T>,
    state: &ClientState<T>,
    server_control: &ParamVector<T>,
    model: &LossModel<T>,
) -> Result<ScaffoldUpdate<T>> {
    input.validate(model)?;
    if !(input.lr > T::zero()) {
        return Err(invalid("lr", "SCAFFOLD needs lr > 0"));
    }
    let n = model.num_params();
    check_len(&state.control_variate, n)?;
    check_len(server_control, n)?;
    let c_i = &state.control_variate;
    let mut w = input.global_params.clone();
    for batch in input.batches {
        let g = input.step_gradient(model, &w, batch)?;
        for (k, wk) in w.as_mut_slice().iter_mut().enumerate() {
            *wk = *wk - input.lr * (g[k] - c_i[k] + server_control[k]);
        }
    }
    let delta = input.finish(&w)?;
    let inv = T::one() / (T::of_usize(input.local_steps()) * input.lr);
    let new_control = ParamVector::from_vec(
        (0..n)
            .map(|k| c_i[k] - server_control[k] - delta[k] * inv)
            .collect(),
    );
    let control_delta = new_control.sub(c_i)?;
    Ok(ScaffoldUpdate {
        delta,
        control_delta,
        new_control,
    })
}
