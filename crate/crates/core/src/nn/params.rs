use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Buffer<T> {
    name: String,
    value: Tensor<T>,
}

/// Registry of every parameter and non-trainable buffer (batch-norm running
/// statistics) of a model. Names are unique across both.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashSet::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|b| (b.name.as_str(), &b.value))
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.buffers.iter_mut().map(|b| (b.name.as_str(), &mut b.value))
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total trainable scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Same names and layout, values converted to `U`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward computation: the tape plus the binding of parameters to tape
/// leaves. Parameters are loaded lazily on first use.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, track_grads: bool) -> Self {
        let bound = vec![None; store.num_params()];
        Session {
            tape: Tape::new(),
            store,
            mode,
            track_grads,
            bound,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.params[id.0].value.clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub(crate) fn tape_and_store(&mut self) -> (&mut Tape<T>, &mut ParamStore<T>) {
        (&mut self.tape, self.store)
    }

    /// Finish the session, returning the tape and the parameter bindings.
    pub fn finish(self) -> (Tape<T>, Vec<Option<Var>>) {
        (self.tape, self.bound)
    }
}

impl<T: Real> ParamStore<T> {
    /// Back-propagate `loss` through `tape` and add the resulting gradients
    /// to every bound parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &[Option<Var>], loss: Var) -> Result<()> {
        let mut grads = tape.backward(loss)?;
        for (p, v) in self.params.iter_mut().zip(bound) {
            let Some(g) = v.and_then(|v| grads.take(v)) else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Finite-difference check of every parameter gradient.
///
/// `f` builds a scalar on a fresh session. The analytic gradient comes from
/// one tracked run; each parameter element is then perturbed by `±step`.
/// Returns the maximum of `|analytic − numeric| / max(1, |numeric|)`.
pub fn gradient_check_params<F>(store: &mut ParamStore<f64>, mut f: F, step: f64) -> Result<f64>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    store.zero_grads();
    let (tape, bound, out) = {
        let mut s = Session::new(store, Mode::Eval, true);
        let out = f(&mut s)?;
        let (tape, bound) = s.finish();
        (tape, bound, out)
    };
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage("gradient check needs a scalar output".into()));
    }
    store.accumulate_grads(&tape, &bound, out)?;
    drop(tape);

    let mut eval = |store: &mut ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store, Mode::Eval, false);
        let out = f(&mut s)?;
        Ok(s.tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for p in 0..store.num_params() {
        let analytic = store.params[p].grad.clone();
        for e in 0..store.params[p].value.numel() {
            let orig = store.params[p].value.data()[e];
            store.params[p].value.data_mut()[e] = orig + step;
            let plus = eval(store)?;
            store.params[p].value.data_mut()[e] = orig - step;
            let minus = eval(store)?;
            store.params[p].value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[e]);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    store.zero_grads();
    Ok(worst)
}
