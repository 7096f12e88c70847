use crate::error::Result;
use crate::ops::{Mode, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// `None` until a backward pass reaches the parameter. Frozen entries
    /// never receive one.
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Named model weights plus batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<ParamEntry>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(ParamEntry {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.params[id.0].frozen = true;
        id
    }

    pub fn add_stats(&mut self, name: impl Into<String>, features: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(features)));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.params[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0].1
    }

    pub fn stats_entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut RunningStats)> {
        self.stats.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    /// Drops every gradient (set-to-none semantics).
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.params
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are copied onto the tape the first time they are used, so
/// a parameter that never takes part in the graph keeps `grad == None`.
pub struct Session<'s> {
    pub tape: Tape,
    pub mode: Mode,
    store: &'s mut ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            mode,
            store,
            bound: vec![None; n],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = &self.store.params[id.0];
        let v = self.tape.leaf(entry.value.clone(), !entry.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn batchnorm1d(&mut self, x: Var, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let mode = self.mode;
        let running = &mut self.store.stats[stats.0].1;
        self.tape.batchnorm1d(x, g, b, running, mode)
    }

    /// Backpropagates `loss` and adds this pass's parameter gradients into
    /// the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let mut by_var: Vec<Option<ParamId>> = vec![None; self.tape.len()];
        for (pid, var) in self.bound.iter().enumerate() {
            if let Some(v) = var {
                by_var[v.index()] = Some(ParamId(pid));
            }
        }
        let store = &mut *self.store;
        self.tape.backward_with(loss, |var, g| {
            if let Some(pid) = by_var[var.index()] {
                let entry = &mut store.params[pid.0];
                match &mut entry.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        entry.grad = Some(Tensor::new(entry.value.shape().to_vec(), g.to_vec()).expect("grad shape"))
                    }
                }
            }
        })?;
        Ok(())
    }
}
