//! Named parameter storage, lazy binding onto a tape, and group freezing.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Array, Graph, NodeId, Precision};

/// Group of a parameter: everything before the first `.`.
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Flat, name-ordered collection of parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Array>,
    precision: Precision,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        Self {
            map: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Inserts (or replaces) `name`, rounding to the store's precision.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Array) {
        self.precision.round_slice(value.data_mut());
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.map.values().map(Array::len).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.map.keys().map(|n| group_of(n).to_string()).collect()
    }

    /// Little-endian bytes of every parameter in `group`, in name order.
    pub fn group_bytes(&self, group: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, a) in self.map.iter().filter(|(n, _)| group_of(n) == group) {
            out.extend_from_slice(name.as_bytes());
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Errors with the list of groups whose names or shapes differ.
    pub fn check_compatible(&self, expected: &ParamStore) -> Result<()> {
        let mut bad = BTreeSet::new();
        for (name, a) in &expected.map {
            match self.map.get(name) {
                Some(b) if b.shape() == a.shape() => {}
                _ => {
                    bad.insert(group_of(name).to_string());
                }
            }
        }
        for name in self.map.keys() {
            if !expected.map.contains_key(name) {
                bad.insert(group_of(name).to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleCheckpoint(bad.into_iter().collect()))
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    Groups(BTreeSet<String>),
}

impl Trainable {
    pub fn groups<I, S>(groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trainable::Groups(groups.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Groups(g) => g.contains(group_of(name)),
        }
    }
}

/// A tape plus on-demand binding of stored parameters.
///
/// Trainable parameters enter the tape as named leaves, frozen ones as
/// constants. Each parameter is bound at most once per session.
pub struct Session<'p> {
    pub g: Graph,
    store: &'p ParamStore,
    trainable: Trainable,
    bound: HashMap<String, NodeId>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, precision: Precision, trainable: Trainable) -> Self {
        Self {
            g: Graph::new(precision),
            store,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(id) = self.bound.get(name) {
            return Ok(*id);
        }
        let value = self.store.get(name)?.clone();
        let id = if self.trainable.contains(name) {
            self.g.param(name, value)
        } else {
            self.g.constant(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}
