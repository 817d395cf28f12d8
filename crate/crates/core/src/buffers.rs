//! The three training datasets and the source-mixed samplers over them.
//!
//! - `demo`: offline demonstrations plus every intervened online transition.
//! - `success`: every transition of every successful episode (starts as a
//!   copy of the offline demos).
//! - `replay`: every online transition.
//!
//! Stores are append-only. Samplers flip a fair coin per element to pick the
//! source store, then draw uniformly within it.

use std::cell::Cell;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GripperMode, ARM_DIM};
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    OfflineDemo,
    OnlineIntervention,
    OnlinePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f32>,
    pub arm_action: Vec<f32>,
    pub gripper_action: GripperMode,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub done: bool,
    pub intervened: bool,
    pub source: Source,
}

/// Append-only transition list with episode boundaries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    items: Vec<Transition>,
    /// Exclusive end index of each complete episode.
    episode_ends: Vec<usize>,
}

impl Store {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn episodes(&self) -> usize {
        self.episode_ends.len()
    }

    pub fn episode_ends(&self) -> &[usize] {
        &self.episode_ends
    }

    fn push_episode<'a>(&mut self, ts: impl IntoIterator<Item = &'a Transition>) {
        let before = self.items.len();
        self.items.extend(ts.into_iter().cloned());
        if self.items.len() > before {
            self.episode_ends.push(self.items.len());
        }
    }
}

/// Which store a sampled element came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Demo,
    Success,
    Replay,
}

/// Sampled transitions, borrowed from the stores, with their origins.
#[derive(Debug, Default)]
pub struct Batch<'a> {
    pub items: Vec<&'a Transition>,
    pub origins: Vec<Origin>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.origins.iter().filter(|&&o| o == origin).count()
    }
}

/// What an ingested episode contributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub to_replay: usize,
    pub to_demo: usize,
    pub to_success: usize,
    pub succeeded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub offline_demo: usize,
    pub online_intervention: usize,
    pub online_policy: usize,
    /// Non-intervened transitions of successful online episodes.
    pub auto_success: usize,
    pub online_episodes: usize,
    pub successful_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferSet {
    obs_dim: usize,
    capacity: usize,
    pub demo: Store,
    pub success: Store,
    pub replay: Store,
    counters: Counters,
    warned_fallback: Cell<bool>,
}

impl BufferSet {
    pub fn new(obs_dim: usize) -> Self {
        Self::with_capacity(obs_dim, DEFAULT_CAPACITY)
    }

    /// `capacity` bounds the total number of transitions held by each store.
    pub fn with_capacity(obs_dim: usize, capacity: usize) -> Self {
        Self {
            obs_dim,
            capacity,
            demo: Store::default(),
            success: Store::default(),
            replay: Store::default(),
            counters: Counters::default(),
            warned_fallback: Cell::new(false),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    fn check_episode(&self, episode: &[Transition], online: bool) -> Result<()> {
        if episode.is_empty() {
            return Err(Error::Contract("empty episode".into()));
        }
        let last = episode.len() - 1;
        for (i, t) in episode.iter().enumerate() {
            let bad = |msg: String| Err(Error::Contract(format!("episode step {i}: {msg}")));
            if t.state.len() != self.obs_dim || t.next_state.len() != self.obs_dim {
                return bad(format!(
                    "state widths {}/{} but buffers hold {}",
                    t.state.len(),
                    t.next_state.len(),
                    self.obs_dim
                ));
            }
            if t.arm_action.len() != ARM_DIM {
                return bad(format!("arm action has {} components", t.arm_action.len()));
            }
            if t.reward != 0.0 && t.reward != 1.0 {
                return bad(format!("reward {} is not 0 or 1", t.reward));
            }
            if t.done != (i == last) {
                return bad("done must be set on the last step and only there".into());
            }
            if i != last && t.reward != 0.0 {
                return bad("reward before the last step".into());
            }
            if i > 0 && episode[i - 1].next_state != t.state {
                return bad("not contiguous with the previous step".into());
            }
            let expected = match (online, t.intervened) {
                (false, _) => Source::OfflineDemo,
                (true, true) => Source::OnlineIntervention,
                (true, false) => Source::OnlinePolicy,
            };
            if t.source != expected || (!online && t.intervened) {
                return bad(format!(
                    "source {:?} with intervened={} in an {} episode",
                    t.source,
                    t.intervened,
                    if online { "online" } else { "offline" }
                ));
            }
        }
        Ok(())
    }

    fn check_capacity(&self, store: &Store, add: usize, name: &str) -> Result<()> {
        if store.len() + add > self.capacity {
            return Err(Error::Buffer(format!(
                "{name} store would exceed its capacity of {} transitions",
                self.capacity
            )));
        }
        Ok(())
    }

    /// Seeds `demo` and `success` with offline demonstration episodes.
    pub fn load_offline_demos(&mut self, episodes: &[Vec<Transition>]) -> Result<()> {
        let total: usize = episodes.iter().map(Vec::len).sum();
        for ep in episodes {
            self.check_episode(ep, false)?;
            if ep[ep.len() - 1].reward != 1.0 {
                return Err(Error::Contract("offline demonstrations must end in success".into()));
            }
        }
        self.check_capacity(&self.demo, total, "demo")?;
        self.check_capacity(&self.success, total, "success")?;
        for ep in episodes {
            self.demo.push_episode(ep);
            self.success.push_episode(ep);
            self.counters.offline_demo += ep.len();
        }
        Ok(())
    }

    /// Routes one online episode into the stores.
    pub fn ingest_episode(&mut self, episode: &[Transition]) -> Result<IngestReport> {
        self.check_episode(episode, true)?;
        let n = episode.len();
        let intervened = episode.iter().filter(|t| t.intervened).count();
        let succeeded = episode[n - 1].reward == 1.0;
        self.check_capacity(&self.replay, n, "replay")?;
        self.check_capacity(&self.demo, intervened, "demo")?;
        if succeeded {
            self.check_capacity(&self.success, n, "success")?;
        }
        self.replay.push_episode(episode);
        self.demo.push_episode(episode.iter().filter(|t| t.intervened));
        if succeeded {
            self.success.push_episode(episode);
            self.counters.auto_success += n - intervened;
            self.counters.successful_episodes += 1;
        }
        self.counters.online_intervention += intervened;
        self.counters.online_policy += n - intervened;
        self.counters.online_episodes += 1;
        Ok(IngestReport {
            to_replay: n,
            to_demo: intervened,
            to_success: if succeeded { n } else { 0 },
            succeeded,
        })
    }

    fn mixed<'a, R: Rng + ?Sized>(
        &'a self,
        a: Origin,
        b: Origin,
        batch: usize,
        rng: &mut R,
    ) -> Batch<'a> {
        let (len_a, len_b) = (self.store(a).len(), self.store(b).len());
        if batch > 0 && (len_a == 0 || len_b == 0) && !self.warned_fallback.get() {
            log::warn!(
                "{:?} store has {len_a} and {:?} store has {len_b} transitions; sampling only the non-empty one",
                a,
                b
            );
            self.warned_fallback.set(true);
        }
        let mut out = Batch {
            items: Vec::with_capacity(batch),
            origins: Vec::with_capacity(batch),
        };
        if len_a == 0 && len_b == 0 {
            return out;
        }
        for _ in 0..batch {
            let pick_a = match (len_a, len_b) {
                (0, _) => false,
                (_, 0) => true,
                _ => rng.random_bool(0.5),
            };
            let origin = if pick_a { a } else { b };
            let store = self.store(origin);
            out.items.push(store.get(rng.random_range(0..store.len())));
            out.origins.push(origin);
        }
        out
    }

    fn store(&self, o: Origin) -> &Store {
        match o {
            Origin::Demo => &self.demo,
            Origin::Success => &self.success,
            Origin::Replay => &self.replay,
        }
    }

    /// Imitation batch: half success, half demo in expectation.
    pub fn sample_bc<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Batch<'_> {
        self.mixed(Origin::Success, Origin::Demo, batch, rng)
    }

    /// Critic/actor batch: half replay, half demo in expectation.
    pub fn sample_rl<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Batch<'_> {
        self.mixed(Origin::Replay, Origin::Demo, batch, rng)
    }

    /// `(demo_ratio, auto_success_ratio)` as percentages of the replay size.
    pub fn ratios(&self) -> Result<(f64, f64)> {
        if self.replay.is_empty() {
            return Err(Error::Buffer("ratios are undefined while the replay store is empty".into()));
        }
        let r = self.replay.len() as f64;
        let c = &self.counters;
        Ok((
            100.0 * (c.offline_demo + c.online_intervention) as f64 / r,
            100.0 * c.auto_success as f64 / r,
        ))
    }

    /// Writes `demo.jsonl`, `success.jsonl`, `replay.jsonl` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, store) in [("demo", &self.demo), ("success", &self.success), ("replay", &self.replay)] {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
            let mut start = 0;
            for (ep, &end) in store.episode_ends.iter().enumerate() {
                for t in &store.items[start..end] {
                    serde_json::to_writer(&mut w, &Line { episode: ep, t: t.clone() })?;
                    w.write_all(b"\n")?;
                }
                start = end;
            }
            w.flush()?;
        }
        let manifest = Manifest {
            obs_dim: self.obs_dim,
            capacity: self.capacity,
            counters: self.counters,
            demo: self.demo.len(),
            success: self.success.len(),
            replay: self.replay.len(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut set = Self::with_capacity(manifest.obs_dim, manifest.capacity);
        set.counters = manifest.counters;
        for (name, expected) in [("demo", manifest.demo), ("success", manifest.success), ("replay", manifest.replay)] {
            let f = fs::File::open(dir.join(format!("{name}.jsonl")))?;
            let mut store = Store::default();
            let mut current = None;
            for line in BufReader::new(f).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let Line { episode, t } = serde_json::from_str(&line)?;
                if current.is_some() && current != Some(episode) {
                    store.episode_ends.push(store.items.len());
                }
                current = Some(episode);
                store.items.push(t);
            }
            if current.is_some() {
                store.episode_ends.push(store.items.len());
            }
            if store.len() != expected {
                return Err(Error::Buffer(format!(
                    "{name}.jsonl has {} transitions, manifest says {expected}",
                    store.len()
                )));
            }
            match name {
                "demo" => set.demo = store,
                "success" => set.success = store,
                _ => set.replay = store,
            }
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    episode: usize,
    #[serde(flatten)]
    t: Transition,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    obs_dim: usize,
    capacity: usize,
    counters: Counters,
    demo: usize,
    success: usize,
    replay: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(n: usize, success: bool, intervened: &[usize], online: bool) -> Vec<Transition> {
        (0..n)
            .map(|i| {
                let iv = online && intervened.contains(&i);
                Transition {
                    state: vec![i as f32, 0.0],
                    arm_action: vec![0.1, -0.1],
                    gripper_action: GripperMode::Hold,
                    reward: if success && i == n - 1 { 1.0 } else { 0.0 },
                    next_state: vec![(i + 1) as f32, 0.0],
                    done: i == n - 1,
                    intervened: iv,
                    source: match (online, iv) {
                        (false, _) => Source::OfflineDemo,
                        (true, true) => Source::OnlineIntervention,
                        (true, false) => Source::OnlinePolicy,
                    },
                }
            })
            .collect()
    }

    #[test]
    fn failed_episode_only_grows_replay() {
        let mut b = BufferSet::new(2);
        let r = b.ingest_episode(&episode(7, false, &[], true)).unwrap();
        assert_eq!((b.replay.len(), b.demo.len(), b.success.len()), (7, 0, 0));
        assert!(!r.succeeded);
    }

    #[test]
    fn successful_episode_with_interventions() {
        let mut b = BufferSet::new(2);
        b.ingest_episode(&episode(12, true, &[2, 3, 9], true)).unwrap();
        assert_eq!((b.replay.len(), b.demo.len(), b.success.len()), (12, 3, 12));
        assert_eq!(b.counters().auto_success, 9);
    }

    #[test]
    fn offline_load_mirrors_demo_into_success() {
        let mut b = BufferSet::new(2);
        let eps: Vec<_> = (0..20).map(|k| episode(5 + k, true, &[], false)).collect();
        b.load_offline_demos(&eps).unwrap();
        assert_eq!(b.demo, b.success);
        assert!(b.replay.is_empty());
        assert_eq!(b.demo.episodes(), 20);
    }

    #[test]
    fn malformed_episodes_are_rejected() {
        let mut b = BufferSet::new(2);
        assert!(b.ingest_episode(&[]).is_err());
        let mut ep = episode(4, false, &[], true);
        ep[1].done = true;
        assert!(b.ingest_episode(&ep).is_err());
        let mut ep = episode(4, false, &[], true);
        ep[3].done = false;
        assert!(b.ingest_episode(&ep).is_err());
        let mut ep = episode(4, false, &[], true);
        ep[2].state = vec![9.0, 9.0];
        assert!(b.ingest_episode(&ep).is_err());
        let mut ep = episode(4, false, &[], true);
        ep[0].intervened = true;
        assert!(b.ingest_episode(&ep).is_err());
        let ep = episode(4, false, &[], false);
        assert!(b.ingest_episode(&ep).is_err());
        assert!(BufferSet::new(3).ingest_episode(&episode(2, false, &[], true)).is_err());
        assert!(b.replay.is_empty());
    }

    #[test]
    fn capacity_is_enforced() {
        let mut b = BufferSet::with_capacity(2, 10);
        b.ingest_episode(&episode(6, false, &[], true)).unwrap();
        assert!(b.ingest_episode(&episode(6, false, &[], true)).is_err());
        assert_eq!(b.replay.len(), 6);
    }

    #[test]
    fn empty_store_falls_back_and_zero_batch_is_empty() {
        let mut b = BufferSet::new(2);
        b.load_offline_demos(&[episode(5, true, &[], false)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = b.sample_rl(64, &mut rng);
        assert_eq!(batch.count(Origin::Demo), 64);
        assert!(b.sample_bc(0, &mut rng).is_empty());
        assert!(BufferSet::new(2).sample_bc(8, &mut rng).is_empty());
    }

    #[test]
    fn ratios_need_replay() {
        let mut b = BufferSet::new(2);
        b.load_offline_demos(&[episode(10, true, &[], false)]).unwrap();
        assert!(b.ratios().is_err());
        b.ingest_episode(&episode(40, false, &[], true)).unwrap();
        assert_eq!(b.ratios().unwrap(), (25.0, 0.0));
    }

    #[test]
    fn save_load_round_trip() {
        let mut b = BufferSet::new(2);
        b.load_offline_demos(&[episode(3, true, &[], false), episode(4, true, &[], false)])
            .unwrap();
        b.ingest_episode(&episode(5, true, &[1], true)).unwrap();
        b.ingest_episode(&episode(6, false, &[0, 5], true)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let back = BufferSet::load(dir.path()).unwrap();
        assert_eq!(back.demo, b.demo);
        assert_eq!(back.success, b.success);
        assert_eq!(back.replay, b.replay);
        assert_eq!(back.counters(), b.counters());
        assert_eq!(back.ratios().unwrap(), b.ratios().unwrap());
    }
}
