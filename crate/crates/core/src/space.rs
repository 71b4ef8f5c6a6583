//! Primitive concept sets and the seen / unseen / test composition splits.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(state index, object index)`.
pub type Pair = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    /// Test labels are the seen and unseen pairs.
    Closed,
    /// Test labels are every state-object combination.
    Open,
}

impl std::str::FromStr for World {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(Error::Config(format!("unknown world `{other}`"))),
        }
    }
}

impl std::fmt::Display for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            World::Closed => "closed",
            World::Open => "open",
        })
    }
}

/// Validated composition space. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct CompositionSpace {
    states: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<Pair>,
    unseen_pairs: Vec<Pair>,
    test_pairs: Vec<Pair>,
    world: World,
    seen_lookup: HashSet<Pair>,
}

#[derive(Serialize, Deserialize)]
struct SpaceRepr {
    states: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<Pair>,
    unseen_pairs: Vec<Pair>,
    world: World,
}

impl TryFrom<SpaceRepr> for CompositionSpace {
    type Error = Error;

    fn try_from(r: SpaceRepr) -> Result<Self> {
        Self::new(r.states, r.objects, r.seen_pairs, r.unseen_pairs, r.world)
    }
}

impl From<CompositionSpace> for SpaceRepr {
    fn from(s: CompositionSpace) -> Self {
        SpaceRepr {
            states: s.states,
            objects: s.objects,
            seen_pairs: s.seen_pairs,
            unseen_pairs: s.unseen_pairs,
            world: s.world,
        }
    }
}

/// Seen pairs split into parallel state and object index arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndex {
    pub att_idx: Vec<usize>,
    pub obj_idx: Vec<usize>,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.att_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.att_idx.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = Pair> + '_ {
        self.att_idx
            .iter()
            .copied()
            .zip(self.obj_idx.iter().copied())
    }
}

fn check_pairs(list: &[Pair], n: usize, m: usize, seen_so_far: &mut HashSet<Pair>) -> Result<()> {
    for &(s, o) in list {
        if s >= n {
            return Err(Error::IndexOutOfRange {
                kind: "state",
                index: s,
                len: n,
            });
        }
        if o >= m {
            return Err(Error::IndexOutOfRange {
                kind: "object",
                index: o,
                len: m,
            });
        }
        if !seen_so_far.insert((s, o)) {
            return Err(Error::DuplicatePair(s, o));
        }
    }
    Ok(())
}

impl CompositionSpace {
    pub fn new(
        states: Vec<String>,
        objects: Vec<String>,
        seen_pairs: Vec<Pair>,
        unseen_pairs: Vec<Pair>,
        world: World,
    ) -> Result<Self> {
        if states.is_empty() || objects.is_empty() {
            return Err(Error::InvalidSpace(
                "state and object lists must be nonempty".into(),
            ));
        }
        if seen_pairs.is_empty() {
            return Err(Error::InvalidSpace("no seen pairs".into()));
        }
        for (kind, names) in [("state", &states), ("object", &objects)] {
            let mut uniq = HashSet::new();
            if let Some(dup) = names.iter().find(|n| !uniq.insert(n.as_str())) {
                return Err(Error::InvalidSpace(format!(
                    "duplicate {kind} name `{dup}`"
                )));
            }
        }
        let (n, m) = (states.len(), objects.len());

        let mut seen_lookup = HashSet::with_capacity(seen_pairs.len());
        check_pairs(&seen_pairs, n, m, &mut seen_lookup)?;
        let mut unseen_lookup = HashSet::with_capacity(unseen_pairs.len());
        check_pairs(&unseen_pairs, n, m, &mut unseen_lookup)?;
        if let Some(&(s, o)) = unseen_pairs.iter().find(|p| seen_lookup.contains(p)) {
            return Err(Error::PairOverlap(s, o));
        }

        let mut state_hit = vec![false; n];
        let mut object_hit = vec![false; m];
        for &(s, o) in &seen_pairs {
            state_hit[s] = true;
            object_hit[o] = true;
        }
        if let Some(s) = state_hit.iter().position(|h| !h) {
            return Err(Error::UncoveredPrimitive {
                kind: "state",
                name: states[s].clone(),
            });
        }
        if let Some(o) = object_hit.iter().position(|h| !h) {
            return Err(Error::UncoveredPrimitive {
                kind: "object",
                name: objects[o].clone(),
            });
        }

        let test_pairs = match world {
            World::Closed => seen_pairs.iter().chain(&unseen_pairs).copied().collect(),
            World::Open => (0..n).flat_map(|s| (0..m).map(move |o| (s, o))).collect(),
        };

        Ok(Self {
            states,
            objects,
            seen_pairs,
            unseen_pairs,
            test_pairs,
            world,
            seen_lookup,
        })
    }

    /// Same primitives and splits, other label space.
    pub fn with_world(&self, world: World) -> Self {
        Self::new(
            self.states.clone(),
            self.objects.clone(),
            self.seen_pairs.clone(),
            self.unseen_pairs.clone(),
            world,
        )
        .expect("re-validating an already valid space")
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn seen_pairs(&self) -> &[Pair] {
        &self.seen_pairs
    }

    pub fn unseen_pairs(&self) -> &[Pair] {
        &self.unseen_pairs
    }

    pub fn test_pairs(&self) -> &[Pair] {
        &self.test_pairs
    }

    pub fn world(&self) -> World {
        self.world
    }

    pub fn is_seen(&self, pair: Pair) -> bool {
        self.seen_lookup.contains(&pair)
    }

    pub fn seen_position(&self, pair: Pair) -> Option<usize> {
        if !self.is_seen(pair) {
            return None;
        }
        self.seen_pairs.iter().position(|&p| p == pair)
    }

    pub fn pair_index(&self) -> PairIndex {
        PairIndex {
            att_idx: self.seen_pairs.iter().map(|p| p.0).collect(),
            obj_idx: self.seen_pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn state_position(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s == name)
    }

    pub fn object_position(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    pub fn pair_name(&self, (s, o): Pair) -> String {
        format!("{} {}", self.states[s], self.objects[o])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(prefix: &str, k: usize) -> Vec<String> {
        (0..k).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn singleton_closed_world() {
        let space = CompositionSpace::new(
            vec!["a".into()],
            vec!["b".into()],
            vec![(0, 0)],
            vec![],
            World::Closed,
        )
        .unwrap();
        assert_eq!(space.test_pairs(), &[(0, 0)]);
    }

    #[test]
    fn open_world_enumerates_state_major() {
        // UT-Zappos sized: 16 states x 12 objects
        let seen: Vec<Pair> = (0..16)
            .map(|s| (s, s % 12))
            .chain((0..12).map(|o| (0, o)))
            .collect();
        let mut dedup = Vec::new();
        for p in seen {
            if !dedup.contains(&p) {
                dedup.push(p);
            }
        }
        let space =
            CompositionSpace::new(names("s", 16), names("o", 12), dedup, vec![], World::Open)
                .unwrap();
        assert_eq!(space.test_pairs().len(), 192);
        assert_eq!(space.test_pairs()[0], (0, 0));
        assert_eq!(space.test_pairs()[1], (0, 1));
        assert_eq!(space.test_pairs()[12], (1, 0));
    }

    #[test]
    fn rejects_overlap_duplicates_and_uncovered() {
        let st = names("s", 2);
        let ob = names("o", 2);
        let err = CompositionSpace::new(
            st.clone(),
            ob.clone(),
            vec![(0, 0), (1, 1)],
            vec![(1, 1)],
            World::Closed,
        );
        assert!(matches!(err, Err(Error::PairOverlap(1, 1))));
        let err = CompositionSpace::new(
            st.clone(),
            ob.clone(),
            vec![(0, 0), (1, 1), (0, 0)],
            vec![],
            World::Closed,
        );
        assert!(matches!(err, Err(Error::DuplicatePair(0, 0))));
        let err = CompositionSpace::new(
            st.clone(),
            ob.clone(),
            vec![(0, 0), (0, 1)],
            vec![(1, 0)],
            World::Closed,
        );
        assert!(matches!(
            err,
            Err(Error::UncoveredPrimitive { kind: "state", .. })
        ));
        let err = CompositionSpace::new(st, ob, vec![(0, 0), (2, 1)], vec![], World::Closed);
        assert!(matches!(
            err,
            Err(Error::IndexOutOfRange { kind: "state", .. })
        ));
    }

    #[test]
    fn pair_index_projects_components() {
        let space = CompositionSpace::new(
            names("s", 3),
            names("o", 2),
            vec![(0, 1), (2, 0), (1, 1)],
            vec![],
            World::Closed,
        )
        .unwrap();
        let idx = space.pair_index();
        assert_eq!(idx.att_idx, vec![0, 2, 1]);
        assert_eq!(idx.obj_idx, vec![1, 0, 1]);
    }

    #[test]
    fn names_are_case_sensitive() {
        let space = CompositionSpace::new(
            vec!["Wet".into(), "wet".into()],
            vec!["dog".into()],
            vec![(0, 0), (1, 0)],
            vec![],
            World::Closed,
        )
        .unwrap();
        assert_eq!(space.state_position("wet"), Some(1));
    }

    fn arb_space() -> impl Strategy<Value = CompositionSpace> {
        (1usize..7, 1usize..7, any::<u64>()).prop_map(|(n, m, seed)| {
            // diagonal cover plus a seeded subset of the remainder
            let mut seen: Vec<Pair> = (0..n.max(m)).map(|k| (k % n, k % m)).collect();
            seen.dedup();
            let mut unseen = Vec::new();
            let mut bits = seed;
            for s in 0..n {
                for o in 0..m {
                    if seen.contains(&(s, o)) {
                        continue;
                    }
                    match bits % 3 {
                        0 => seen.push((s, o)),
                        1 => unseen.push((s, o)),
                        _ => {}
                    }
                    bits = bits.rotate_right(2) ^ 0x9e37_79b9;
                }
            }
            CompositionSpace::new(names("s", n), names("o", m), seen, unseen, World::Closed)
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn pair_index_round_trips(space in arb_space()) {
            let idx = space.pair_index();
            prop_assert_eq!(idx.len(), space.seen_pairs().len());
            let rebuilt: Vec<Pair> = idx.pairs().collect();
            prop_assert_eq!(rebuilt.as_slice(), space.seen_pairs());
        }

        #[test]
        fn open_world_is_a_bijection(space in arb_space()) {
            let open = space.with_world(World::Open);
            let n = open.n_states();
            let m = open.n_objects();
            prop_assert_eq!(open.test_pairs().len(), n * m);
            let uniq: HashSet<_> = open.test_pairs().iter().collect();
            prop_assert_eq!(uniq.len(), n * m);
        }

        #[test]
        fn membership_agrees_with_list(space in arb_space()) {
            let open = space.with_world(World::Open);
            for &p in open.test_pairs() {
                prop_assert_eq!(space.is_seen(p), space.seen_pairs().contains(&p));
                prop_assert_eq!(space.seen_position(p).is_some(), space.is_seen(p));
            }
        }
    }
}
