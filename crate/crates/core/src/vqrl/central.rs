use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

/// Immutable copy of the central parameters at one version.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub version: u64,
    pub policy: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
    /// [`snapshot_checksum`] of the fields above, computed by the writer.
    pub checksum: u64,
}

impl Snapshot {
    /// True when the stored checksum matches the contents.
    pub fn is_consistent(&self) -> bool {
        snapshot_checksum(self.version, &self.policy, &self.value) == self.checksum
    }
}

/// FNV-1a over the version and the bit patterns of every value.
pub fn snapshot_checksum(version: u64, policy: &[Vec<f64>], value: &[Vec<f64>]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut mix = |word: u64| {
        for b in word.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    mix(version);
    for group in [policy, value] {
        mix(group.len() as u64);
        for t in group {
            mix(t.len() as u64);
            t.iter().for_each(|v| mix(v.to_bits()));
        }
    }
    h
}

/// Gradients pushed by a worker, computed against snapshot `based_on`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub policy: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
    pub based_on: u64,
}

/// Parameter server. Readers grab the current snapshot without waiting on
/// gradient work; writers apply messages one at a time and publish a new
/// snapshot by swapping a pointer, so a reader sees either the old or the
/// new parameters, never a mix.
#[derive(Debug)]
pub struct CentralStore {
    optim: Mutex<(ParamStore, ParamStore)>,
    current: RwLock<Arc<Snapshot>>,
}

impl CentralStore {
    /// Takes ownership of the actor and critic stores (and their Adam
    /// settings).
    pub fn new(policy: ParamStore, value: ParamStore) -> Self {
        let snap = make_snapshot(0, &policy, &value);
        CentralStore {
            optim: Mutex::new((policy, value)),
            current: RwLock::new(Arc::new(snap)),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.current.read().expect("snapshot lock poisoned"))
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    /// Actor and critic stores, including optimizer state.
    pub fn stores(&self) -> (ParamStore, ParamStore) {
        self.optim.lock().expect("optimizer lock poisoned").clone()
    }
}

fn make_snapshot(version: u64, policy: &ParamStore, value: &ParamStore) -> Snapshot {
    let (p, v) = (policy.values(), value.values());
    Snapshot {
        version,
        checksum: snapshot_checksum(version, &p, &v),
        policy: p,
        value: v,
    }
}

/// Applies one gradient message (an Adam step on each network) and
/// publishes the result. Stale messages are accepted. Returns the new
/// version.
pub fn central_apply(central: &CentralStore, msg: &GradientMessage) -> Result<u64> {
    let mut guard = central.optim.lock().map_err(|_| Error::invalid("optimizer lock poisoned"))?;
    let (policy, value) = &mut *guard;
    check_shapes("policy", policy, &msg.policy)?;
    check_shapes("value", value, &msg.value)?;
    policy.apply_grads(&msg.policy)?;
    value.apply_grads(&msg.value)?;
    let version = central.version() + 1;
    let snap = Arc::new(make_snapshot(version, policy, value));
    *central.current.write().map_err(|_| Error::invalid("snapshot lock poisoned"))? = snap;
    Ok(version)
}

fn check_shapes(what: &str, store: &ParamStore, grads: &[Vec<f64>]) -> Result<()> {
    let ok = grads.len() == store.len() && store.iter().zip(grads).all(|(p, g)| p.tensor.len() == g.len());
    if ok {
        Ok(())
    } else {
        Err(Error::shape("central_apply", format!("{what} gradient does not match the parameter layout")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{AdamConfig, Tensor};

    fn store(n: usize, lr: f64) -> ParamStore {
        let mut s = ParamStore::new(AdamConfig::with_lr(lr));
        s.add("a", Tensor::filled(vec![n], 0.5)).unwrap();
        s.add("b", Tensor::filled(vec![3], -0.25)).unwrap();
        s
    }

    fn msg(n: usize, g: f64, based_on: u64) -> GradientMessage {
        GradientMessage {
            policy: vec![vec![g; n], vec![g; 3]],
            value: vec![vec![-g; n], vec![g; 3]],
            based_on,
        }
    }

    #[test]
    fn zero_gradient_bumps_version_only() {
        let c = CentralStore::new(store(4, 1e-2), store(4, 1e-1));
        let before = c.snapshot();
        assert_eq!(central_apply(&c, &msg(4, 0.0, 0)).unwrap(), 1);
        let after = c.snapshot();
        assert_eq!(after.version, 1);
        assert_eq!((&after.policy, &after.value), (&before.policy, &before.value));
        assert!(after.is_consistent() && before.is_consistent());
        assert_ne!(after.checksum, before.checksum);
    }

    #[test]
    fn sequential_messages_match_direct_adam_steps() {
        let c = CentralStore::new(store(4, 1e-2), store(4, 1e-1));
        let (mut p, mut v) = (store(4, 1e-2), store(4, 1e-1));
        for m in [msg(4, 0.3, 0), msg(4, 0.3, 0)] {
            central_apply(&c, &m).unwrap();
            p.apply_grads(&m.policy).unwrap();
            v.apply_grads(&m.value).unwrap();
        }
        let s = c.snapshot();
        assert_eq!(s.version, 2);
        assert_eq!(s.policy, p.values());
        assert_eq!(s.value, v.values());
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let c = CentralStore::new(store(4, 1e-2), store(4, 1e-1));
        assert!(central_apply(&c, &msg(5, 0.1, 0)).is_err());
        let mut m = msg(4, 0.1, 0);
        m.value.pop();
        assert!(central_apply(&c, &m).is_err());
        assert_eq!(c.version(), 0);
    }

    #[test]
    fn checksum_detects_any_single_change() {
        let s = make_snapshot(3, &store(4, 1e-2), &store(4, 1e-2));
        let mut torn = s.clone();
        torn.policy[0][2] += 1e-9;
        assert!(s.is_consistent() && !torn.is_consistent());
        let mut moved = s.clone();
        moved.version += 1;
        assert!(!moved.is_consistent());
    }
}
