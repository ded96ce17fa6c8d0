//! Named parameter storage, tape binding, and checkpoint files.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{usage_err, Error, Result};
use crate::ops::norm;
use crate::tensor::{Shape5, Tensor5};

/// Manifest file written next to the tensor dumps of a checkpoint.
pub const MANIFEST: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor5,
    trainable: bool,
}

/// Ordered collection of named tensors. Non-trainable entries hold frozen
/// matrices and batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor5, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
            return Err(usage_err!("invalid parameter name {name:?}"));
        }
        if self.index.contains_key(&name) {
            return Err(usage_err!("duplicate parameter name {name:?}"));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor5 {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor5 {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor5> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Bitwise equality of names, flags and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value.bit_eq(&b.value))
    }

    /// Writes one dump per entry plus the manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("name,trainable,n,c,t,h,w,file\n");
        for e in &self.entries {
            let file = format!("{}.t5", e.name);
            e.value.save(dir.join(&file))?;
            let [n, c, t, h, w] = e.value.shape().dims();
            manifest.push_str(&format!("{},{},{n},{c},{t},{h},{w},{file}\n", e.name, e.trainable as u8));
        }
        fs::File::create(dir.join(MANIFEST))?.write_all(manifest.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let origin = path.display().to_string();
        let bad = |detail: String| Error::Format {
            path: origin.clone(),
            detail,
        };
        let reader = BufReader::new(fs::File::open(&path)?);
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h == "name,trainable,n,c,t,h,w,file" => {}
            _ => return Err(bad("missing manifest header".into())),
        }
        let mut store = ParamStore::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("line {}: expected 8 fields", i + 2)));
            }
            let dims: Vec<usize> = f[2..7]
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            let trainable = match f[1] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("line {}: bad trainable flag {other:?}", i + 2))),
            };
            let value = Tensor5::load(dir.join(f[7]))?;
            let expected = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
            if value.shape() != expected {
                return Err(bad(format!("{}: shape {:?} does not match manifest {:?}", f[0], value.shape(), expected)));
            }
            store.add(f[0], value, trainable)?;
        }
        Ok(store)
    }
}

/// Binds store entries onto a tape on first use, so each parameter maps to a
/// single leaf per step.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<(ParamId, Var<'t>)>>,
    train: bool,
    buffer_updates: RefCell<Vec<(ParamId, Tensor5)>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(Vec::new()),
            train,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(&(_, v)) = self.bound.borrow().iter().find(|(i, _)| *i == id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.store.is_trainable(id) && self.train {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().push((id, v));
        v
    }

    /// Queues a new value for a non-trainable buffer.
    pub fn update_buffer(&self, id: ParamId, value: Tensor5) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Gradients of every bound trainable parameter, in binding order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor5)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|&(id, v)| (id, grads.of(v)))
            .collect()
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor5)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }
}

/// Batch-norm parameters and running statistics held in a store.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        let ch = Shape5::channels(channels);
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor5::full(ch, 1.0), true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor5::zeros(ch), true)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor5::zeros(ch), false)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor5::full(ch, 1.0), false)?,
        })
    }

    /// Batch statistics (queuing running-stat updates) in training mode,
    /// running statistics otherwise.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let store = ctx.store();
        if ctx.is_train() {
            let o = x.batchnorm_train(gamma, beta)?;
            for (id, batch) in [(self.running_mean, &o.batch_mean), (self.running_var, &o.batch_var)] {
                let mut running = store.get(id).clone();
                norm::update_running(running.data_mut(), batch);
                ctx.update_buffer(id, running);
            }
            Ok(o.out)
        } else {
            x.batchnorm_eval(
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
            )
        }
    }
}
