//! Query sources: a library of named concepts built from known
//! configurations, and a client for a remote text-embedding service.

use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, Embedding, Query};
use crate::env::{project, tip_pose, Configuration, Encoder};
use crate::error::{Error, Result};

pub const HANDCRAFTED: usize = 16;
pub const COMPOSITES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Concept {
    pub name: String,
    pub embedding: Embedding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_config: Option<Configuration>,
    pub split: Split,
}

impl Concept {
    pub fn query(&self) -> Query {
        Query {
            name: self.name.clone(),
            embedding: self.embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptLibrary {
    pub entries: Vec<Concept>,
}

/// Arm pose with the cube at its default spot.
fn arm(joints: [f64; 4]) -> [f64; 7] {
    [joints[0], joints[1], joints[2], joints[3], 0.8, 0.2, 0.0]
}

/// Default arm with the cube placed as given.
fn cube(x: f64, y: f64, theta: f64) -> [f64; 7] {
    [0.0, 0.0, 0.0, 0.0, x, y, theta]
}

/// Arm pose with the cube centred on the tip.
fn holding(joints: [f64; 4], theta: f64) -> [f64; 7] {
    let (tip, _) = tip_pose(&joints);
    [joints[0], joints[1], joints[2], joints[3], tip[0], tip[1], theta]
}

/// The sixteen named target configurations.
pub fn handcrafted_sources() -> Vec<(&'static str, Configuration)> {
    let raw: [(&str, [f64; 7]); HANDCRAFTED] = [
        ("reach-up", arm([FRAC_PI_2, 0.0, 0.0, 0.0])),
        ("reach-left", arm([PI - 0.1, 0.0, 0.0, 0.0])),
        ("point-down", arm([-FRAC_PI_2, 0.0, 0.0, 0.0])),
        ("arm-folded", arm([0.3, 2.4, -2.4, 2.0])),
        ("wave", arm([1.2, 0.6, -0.9, 1.2])),
        ("zigzag", arm([0.4, 1.2, -2.0, 1.8])),
        ("hook", arm([1.9, -1.5, -1.2, -1.0])),
        ("curl-left", [2.2, 1.0, 1.0, 1.0, -0.8, 0.3, 0.0]),
        ("tip-on-cube", holding([0.5, 0.0, 0.0, 0.0], 0.0)),
        ("lift-cube", holding([1.1, -0.4, -0.3, 0.0], 0.4)),
        ("cube-far-right", cube(1.9, 0.1, 0.0)),
        ("cube-far-left", cube(-1.9, 0.1, 0.0)),
        ("cube-high", cube(0.5, 1.6, 0.0)),
        ("cube-tilted", cube(0.8, 0.15, FRAC_PI_4)),
        ("cube-spun", cube(-0.8, 0.15, -2.3)),
        ("cube-near-base", [1.0, 0.0, 0.0, 0.0, 0.2, 0.15, 0.0]),
    ];
    raw.iter()
        .map(|(n, v)| (*n, project(v).expect("finite literals")))
        .collect()
}

impl ConceptLibrary {
    /// Sixteen handcrafted concepts embedded from their source
    /// configurations, then sixteen composites formed as the normalized
    /// mean of handcrafted pairs `(i, i + 5 mod 16)`, which have no source.
    /// A seeded shuffle assigns half of all entries to each split.
    pub fn build(encoder: &Encoder, seed: u64) -> Result<Self> {
        let mut entries = Vec::with_capacity(HANDCRAFTED + COMPOSITES);
        for (name, q) in handcrafted_sources() {
            entries.push(Concept {
                name: name.to_string(),
                embedding: normalize(encoder.true_config_embedding(&q)?.values())?,
                source_config: Some(q),
                split: Split::Train,
            });
        }
        for i in 0..COMPOSITES {
            let (a, b) = (&entries[i], &entries[(i + 5) % HANDCRAFTED]);
            let mean: Vec<f64> = a
                .embedding
                .values()
                .iter()
                .zip(b.embedding.values())
                .map(|(x, y)| (x + y) / 2.0)
                .collect();
            entries.push(Concept {
                name: format!("{}+{}", a.name, b.name),
                embedding: normalize(&mean)?,
                source_config: None,
                split: Split::Train,
            });
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for &i in &order[entries.len() / 2..] {
            entries[i].split = Split::Test;
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Concept> {
        self.entries
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn lookup(&self, name: &str) -> Result<Query> {
        self.get(name).map(Concept::query)
    }

    pub fn handcrafted(&self) -> impl Iterator<Item = &Concept> {
        self.entries.iter().filter(|c| c.source_config.is_some())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Concept> {
        self.entries.iter().filter(move |c| c.split == split)
    }

    /// Checks name uniqueness, unit embeddings and admissible sources.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.entries {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::ConfigInvalid(format!("duplicate concept {:?}", c.name)));
            }
            if !c.embedding.is_unit() {
                return Err(Error::ConfigInvalid(format!("concept {:?} is not unit-norm", c.name)));
            }
            if let Some(q) = &c.source_config {
                q.check_admissible()?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let lib: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lib.validate()?;
        Ok(lib)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Remote text-embedding client. Sends `{"text": ...}` by POST and expects
/// `{"embedding": [...]}`; transport failures are retried once.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub timeout: Duration,
    pub dim: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
            dim,
        }
    }

    fn attempt(&self, agent: &ureq::Agent, text: &str) -> std::result::Result<String, ureq::Error> {
        let mut resp = agent.post(&self.endpoint).send_json(EmbedRequest { text })?;
        resp.body_mut().read_to_string()
    }

    pub fn embed(&self, text: &str) -> Result<Query> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = match self.attempt(&agent, text) {
            Ok(b) => b,
            Err(ureq::Error::StatusCode(code)) => return Err(Error::BadResponse(format!("HTTP status {code}"))),
            Err(_) => self.attempt(&agent, text).map_err(|e| match e {
                ureq::Error::StatusCode(code) => Error::BadResponse(format!("HTTP status {code}")),
                other => Error::Unreachable(other.to_string()),
            })?,
        };
        let parsed: EmbedResponse =
            serde_json::from_str(&body).map_err(|e| Error::BadResponse(format!("invalid JSON body: {e}")))?;
        if parsed.embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: parsed.embedding.len(),
            });
        }
        Query::from_raw(text, &parsed.embedding)
    }
}

/// One-shot form of [`RemoteEmbedder::embed`].
pub fn remote_embed(endpoint: &str, text: &str, dim: usize) -> Result<Query> {
    RemoteEmbedder::new(endpoint, dim).embed(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::score;

    #[test]
    fn library_shape_and_self_scores() {
        let enc = Encoder::default_views(0);
        let lib = ConceptLibrary::build(&enc, 1).unwrap();
        assert_eq!(lib.len(), 32);
        lib.validate().unwrap();
        assert_eq!(lib.handcrafted().count(), 16);
        assert!(lib.entries[16..].iter().all(|c| c.source_config.is_none()));
        assert_eq!(lib.split(Split::Train).count(), 16);
        for c in lib.handcrafted() {
            let e = enc.true_config_embedding(c.source_config.as_ref().unwrap()).unwrap();
            let s = score(&e, &c.query()).unwrap();
            assert!((s - e.norm()).abs() <= 1e-6, "{}", c.name);
        }
        assert_eq!(lib, ConceptLibrary::build(&enc, 1).unwrap());
        assert_ne!(
            lib.split(Split::Test).map(|c| &c.name).collect::<Vec<_>>(),
            ConceptLibrary::build(&enc, 2).unwrap().split(Split::Test).map(|c| &c.name).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sources_are_distinct_and_need_no_projection() {
        let srcs = handcrafted_sources();
        for (i, (_, a)) in srcs.iter().enumerate() {
            assert_eq!(project(&a.to_array()).unwrap(), *a);
            for (_, b) in &srcs[i + 1..] {
                assert!(a.distance(b) > 0.1);
            }
        }
    }

    #[test]
    fn lookup_and_round_trip() {
        let enc = Encoder::default_views(0);
        let lib = ConceptLibrary::build(&enc, 0).unwrap();
        let q = lib.lookup("reach-up").unwrap();
        assert_eq!(q.name, "reach-up");
        assert!(matches!(lib.lookup("moonwalk"), Err(Error::UnknownConcept(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.json");
        lib.save(&path).unwrap();
        let back = ConceptLibrary::load(&path).unwrap();
        assert_eq!(back.lookup("reach-up").unwrap(), q);
        assert_eq!(back, lib);
    }
}
