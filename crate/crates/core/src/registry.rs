//! Content-addressed store of versioned VPF artifacts.
//!
//! [`Registry`] is the in-memory catalog; persistence is layered on top by
//! the host crate. [`RegistryService`] answers `FetchVpf` frames on the
//! simulator.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::Digest256;
use crate::model::{NodeId, SemVer, VpfDescriptor};
use crate::note::Note;
use crate::simnet::Ctx;
use crate::transport::{self, FramePolicy};
use crate::wire::Message;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub vpf_id: String,
    pub version: SemVer,
    pub artifact_digest: Digest256,
    #[serde(skip)]
    pub blob: Vec<u8>,
    pub metadata: VpfDescriptor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub vpf_id: String,
    pub version: SemVer,
    pub digest: Digest256,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("{0} {1} is already published")]
    DuplicateVersion(String, SemVer),
    #[error("{0} {1} not found")]
    NotFound(String, SemVer),
    #[error("blob for {0} {1} does not hash to its recorded digest")]
    DigestMismatch(String, SemVer),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    records: BTreeMap<(String, SemVer), ArtifactRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Stores `blob` under `(desc.vpf_id, desc.version)`. The descriptor's
    /// digest is replaced by the blob's hash, which is returned.
    pub fn publish(&mut self, mut desc: VpfDescriptor, blob: Vec<u8>) -> Result<Digest256, RegistryError> {
        let key = (desc.vpf_id.clone(), desc.version);
        if self.records.contains_key(&key) {
            return Err(RegistryError::DuplicateVersion(key.0, key.1));
        }
        let digest = Digest256::of(&blob);
        desc.artifact_digest = digest;
        self.records.insert(
            key,
            ArtifactRecord { vpf_id: desc.vpf_id.clone(), version: desc.version, artifact_digest: digest, blob, metadata: desc },
        );
        Ok(digest)
    }

    /// Re-inserts a record loaded from storage after checking its hash.
    pub fn restore(&mut self, record: ArtifactRecord) -> Result<(), RegistryError> {
        let key = (record.vpf_id.clone(), record.version);
        if Digest256::of(&record.blob) != record.artifact_digest || record.metadata.artifact_digest != record.artifact_digest
        {
            return Err(RegistryError::DigestMismatch(key.0, key.1));
        }
        if self.records.contains_key(&key) {
            return Err(RegistryError::DuplicateVersion(key.0, key.1));
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn fetch(&self, vpf_id: &str, version: SemVer) -> Result<(&VpfDescriptor, &[u8]), RegistryError> {
        self.records
            .get(&(String::from(vpf_id), version))
            .map(|r| (&r.metadata, r.blob.as_slice()))
            .ok_or_else(|| RegistryError::NotFound(String::from(vpf_id), version))
    }

    pub fn record(&self, vpf_id: &str, version: SemVer) -> Option<&ArtifactRecord> {
        self.records.get(&(String::from(vpf_id), version))
    }

    /// Sorted by id, then version.
    pub fn list(&self) -> Vec<CatalogEntry> {
        self.records
            .values()
            .map(|r| CatalogEntry { vpf_id: r.vpf_id.clone(), version: r.version, digest: r.artifact_digest })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Registry node: serves `FetchVpf` with `VpfBlob`.
#[derive(Clone, Debug)]
pub struct RegistryService {
    pub registry: Registry,
    pub policy: FramePolicy,
    /// Artifacts served with one flipped byte (fault injection).
    pub corrupt: BTreeSet<String>,
    pub served: u64,
}

impl RegistryService {
    pub fn new(registry: Registry, policy: FramePolicy) -> Self {
        RegistryService { registry, policy, corrupt: BTreeSet::new(), served: 0 }
    }

    pub fn on_message(&mut self, ctx: &mut Ctx<'_, Note>, src: NodeId, msg: Message) {
        let Message::FetchVpf { vpf_id, version } = msg else { return };
        let blob = self.registry.fetch(&vpf_id, version).ok().map(|(_, b)| {
            let mut b = b.to_vec();
            if self.corrupt.contains(&vpf_id) {
                match b.first_mut() {
                    Some(x) => *x ^= 0x01,
                    None => b.push(0),
                }
            }
            b
        });
        self.served += 1;
        ctx.note(Note::VpfServed { to: src, vpf_id: vpf_id.clone(), found: blob.is_some() });
        transport::send(ctx, &self.policy, src, &Message::VpfBlob { vpf_id, version, blob });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExecutionMode;
    use alloc::vec;
    use proptest::prelude::*;

    fn desc(id: &str, v: SemVer) -> VpfDescriptor {
        VpfDescriptor {
            vpf_id: id.into(),
            version: v,
            execution_mode: ExecutionMode::Cyclic { period: 1000 },
            logic_name: "pid".into(),
            state_schema_id: "pid/1".into(),
            artifact_digest: Digest256::ZERO,
        }
    }

    #[test]
    fn publish_and_fetch() {
        let mut r = Registry::new();
        assert!(r.list().is_empty());
        let blob = b"kp=1\n".to_vec();
        let d = r.publish(desc("pid", SemVer::new(1, 0, 0)), blob.clone()).unwrap();
        assert_eq!(d, Digest256::of(&blob));
        let (meta, got) = r.fetch("pid", SemVer::new(1, 0, 0)).unwrap();
        assert_eq!(got, &blob[..]);
        assert_eq!(meta.artifact_digest, d);
        assert_eq!(
            r.publish(desc("pid", SemVer::new(1, 0, 0)), vec![]),
            Err(RegistryError::DuplicateVersion("pid".into(), SemVer::new(1, 0, 0)))
        );
        assert_eq!(r.fetch("nope", SemVer::new(1, 0, 0)), Err(RegistryError::NotFound("nope".into(), SemVer::new(1, 0, 0))));
        // The failed publish left the record untouched.
        assert_eq!(r.fetch("pid", SemVer::new(1, 0, 0)).unwrap().1, &blob[..]);
    }

    #[test]
    fn list_is_sorted() {
        let mut r = Registry::new();
        r.publish(desc("b", SemVer::new(1, 0, 0)), vec![1]).unwrap();
        r.publish(desc("a", SemVer::new(2, 0, 0)), vec![2]).unwrap();
        r.publish(desc("a", SemVer::new(1, 10, 0)), vec![3]).unwrap();
        let l: Vec<_> = r.list().into_iter().map(|e| (e.vpf_id, e.version)).collect();
        assert_eq!(
            l,
            vec![("a".into(), SemVer::new(1, 10, 0)), ("a".into(), SemVer::new(2, 0, 0)), ("b".into(), SemVer::new(1, 0, 0))]
        );
    }

    #[test]
    fn restore_checks_digest() {
        let mut a = Registry::new();
        a.publish(desc("x", SemVer::new(0, 1, 0)), vec![9, 9]).unwrap();
        let mut rec = a.record("x", SemVer::new(0, 1, 0)).unwrap().clone();
        let mut b = Registry::new();
        b.restore(rec.clone()).unwrap();
        assert_eq!(a, b);
        rec.blob[0] = 8;
        assert!(matches!(Registry::new().restore(rec), Err(RegistryError::DigestMismatch(..))));
    }

    proptest! {
        #[test]
        fn list_matches_published_set(
            items in proptest::collection::btree_map(("[a-d]{1,2}", 0u16..3, 0u16..3), proptest::collection::vec(any::<u8>(), 0..16), 0..20)
        ) {
            let mut r = Registry::new();
            let mut expect = Vec::new();
            for ((id, major, minor), blob) in &items {
                let v = SemVer::new(*major, *minor, 0);
                let d = r.publish(desc(id, v), blob.clone()).unwrap();
                prop_assert_eq!(d, Digest256::of(blob));
                expect.push(CatalogEntry { vpf_id: id.clone(), version: v, digest: d });
            }
            expect.sort_by(|a, b| (&a.vpf_id, a.version).cmp(&(&b.vpf_id, b.version)));
            prop_assert_eq!(r.list(), expect);
            for e in r.list() {
                prop_assert_eq!(Digest256::of(r.fetch(&e.vpf_id, e.version).unwrap().1), e.digest);
            }
        }
    }
}
