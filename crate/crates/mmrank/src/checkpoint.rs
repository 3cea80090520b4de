//! Run-state serialization. A checkpoint captures everything the training
//! trajectory depends on (params, optimizer state, memory bank, step index,
//! counters) plus the config fingerprint; resuming under a different config
//! is refused outright rather than silently diverging.

use crate::config::RunConfig;
use crate::data::Corpus;
use crate::memory_bank::{BankSnapshot, MemoryBank};
use crate::trainer::{Counters, Trainer};
use anyhow::{bail, Context, Result};
use mmrank_core::{Adam, ParamStore};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub step: u64,
    pub counters: Counters,
    pub store: ParamStore,
    pub adam: Adam,
    pub bank: BankSnapshot,
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.cfg.fingerprint(),
            step: self.step,
            counters: self.counters.clone(),
            store: self.store.clone(),
            adam: self.adam.clone(),
            bank: self.bank.snapshot(),
        }
    }

    /// Rebuild a trainer mid-run. The trajectory from here is bitwise the
    /// one the checkpointed run would have continued.
    pub fn resume(cfg: RunConfig, corpus: &Corpus, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.fingerprint != cfg.fingerprint() {
            bail!(
                "checkpoint fingerprint {} does not match config fingerprint {}",
                ckpt.fingerprint,
                cfg.fingerprint()
            );
        }
        let mut t = Trainer::new(cfg, corpus)?;
        t.step = ckpt.step;
        t.counters = ckpt.counters;
        t.store = ckpt.store;
        t.adam = ckpt.adam;
        t.bank = MemoryBank::restore(ckpt.bank, t.cfg.bank.capacity, t.cfg.bank.window_steps);
        Ok(t)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let f = File::create(path).with_context(|| format!("create {}", path.display()))?;
    serde_json::to_writer(BufWriter::new(f), ckpt)
        .with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).with_context(|| format!("open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f))
        .with_context(|| format!("parse {}", path.display()))
}
