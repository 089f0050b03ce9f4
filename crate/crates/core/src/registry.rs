//! Name-keyed registries for the interchangeable pieces of the pipeline.
//!
//! Three families are pluggable: token weighting (`hard`, `soft`), the
//! sampler's score combiner (`sum`, `max`), and the context source
//! (`none`, `external`, `internal`, `virtual`). Each is a trait object
//! registered under a name and resolved from the config or command line.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{CfError, Result};
use crate::estimate::{HardThreshold, SoftProbability, TokenWeighting};
use crate::pool::{MaxCombiner, ScoreCombiner, SumCombiner};
use crate::sources::{ContextSourceFactory, ExternalScenes, InternalBatch, NoContext, VirtualScenes};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Registers `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) -> &mut Self {
        self.entries.insert(name.into(), item);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| CfError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// All strategy registries, pre-populated with the built-ins.
pub struct Strategies {
    pub weighting: Registry<dyn TokenWeighting>,
    pub combiners: Registry<dyn ScoreCombiner>,
    pub sources: Registry<dyn ContextSourceFactory>,
}

impl Strategies {
    pub fn builtin() -> Self {
        let mut weighting: Registry<dyn TokenWeighting> = Registry::new("weight mode");
        weighting
            .register("hard", Arc::new(HardThreshold))
            .register("soft", Arc::new(SoftProbability));

        let mut combiners: Registry<dyn ScoreCombiner> = Registry::new("pool combiner");
        combiners
            .register("sum", Arc::new(SumCombiner))
            .register("max", Arc::new(MaxCombiner));

        let mut sources: Registry<dyn ContextSourceFactory> = Registry::new("context variant");
        sources
            .register("none", Arc::new(NoContext))
            .register("external", Arc::new(ExternalScenes))
            .register("internal", Arc::new(InternalBatch))
            .register("virtual", Arc::new(VirtualScenes));

        Self {
            weighting,
            combiners,
            sources,
        }
    }
}

impl Default for Strategies {
    fn default() -> Self {
        Self::builtin()
    }
}
