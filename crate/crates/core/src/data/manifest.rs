//! On-disk dataset manifests.
//!
//! A manifest directory holds `states.txt`, `objects.txt`, one
//! `pairs_{split}.txt` per pair list, `features.bin` and `index.csv`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair, World};

pub const INDEX_HEADER: &str = "sample_id,offset,state,object,split";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

/// The five pair lists. `train` is the seen set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitPairs {
    pub train: Vec<Pair>,
    pub val_seen: Vec<Pair>,
    pub val_unseen: Vec<Pair>,
    pub test_seen: Vec<Pair>,
    pub test_unseen: Vec<Pair>,
}

impl SplitPairs {
    /// `(file stem, list)` in file order.
    pub fn lists(&self) -> [(&'static str, &Vec<Pair>); 5] {
        [
            ("train", &self.train),
            ("val_seen", &self.val_seen),
            ("val_unseen", &self.val_unseen),
            ("test_seen", &self.test_seen),
            ("test_unseen", &self.test_unseen),
        ]
    }

    fn allowed(&self, split: Split) -> (&[Pair], &[Pair]) {
        match split {
            Split::Train => (&self.train, &[]),
            Split::Val => (&self.val_seen, &self.val_unseen),
            Split::Test => (&self.test_seen, &self.test_unseen),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub pair: Pair,
    pub split: Split,
}

/// Validated dataset: names, pair lists, sample records and their features
/// (row `i` of `features` belongs to `records[i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    states: Vec<String>,
    objects: Vec<String>,
    pairs: SplitPairs,
    records: Vec<SampleRecord>,
    features: Matrix,
}

fn check_list(name: &str, list: &[Pair], n: usize, m: usize) -> Result<()> {
    let mut set = HashSet::new();
    for &(s, o) in list {
        if s >= n || o >= m {
            return Err(Error::Manifest(format!(
                "pairs_{name}: pair ({s}, {o}) out of range"
            )));
        }
        if !set.insert((s, o)) {
            return Err(Error::Manifest(format!(
                "pairs_{name}: duplicate pair ({s}, {o})"
            )));
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(
        states: Vec<String>,
        objects: Vec<String>,
        pairs: SplitPairs,
        records: Vec<SampleRecord>,
        features: Matrix,
    ) -> Result<Self> {
        let (n, m) = (states.len(), objects.len());
        for (name, list) in pairs.lists() {
            check_list(name, list, n, m)?;
        }
        // Space construction checks names, coverage and seen/unseen overlap.
        CompositionSpace::new(
            states.clone(),
            objects.clone(),
            pairs.train.clone(),
            pairs.test_unseen.clone(),
            World::Closed,
        )?;
        CompositionSpace::new(
            states.clone(),
            objects.clone(),
            pairs.train.clone(),
            pairs.val_unseen.clone(),
            World::Closed,
        )?;
        let seen: HashSet<Pair> = pairs.train.iter().copied().collect();
        for (name, list) in [
            ("val_seen", &pairs.val_seen),
            ("test_seen", &pairs.test_seen),
        ] {
            if let Some(p) = list.iter().find(|p| !seen.contains(p)) {
                return Err(Error::Manifest(format!(
                    "pairs_{name}: pair {p:?} is not a train pair"
                )));
            }
        }
        if features.rows() != records.len() {
            return Err(Error::Manifest(format!(
                "{} feature rows for {} records",
                features.rows(),
                records.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Manifest("non-finite feature value".into()));
        }
        let manifest = Self {
            states,
            objects,
            pairs,
            records,
            features,
        };
        let mut ids = HashSet::new();
        for (i, r) in manifest.records.iter().enumerate() {
            manifest
                .check_record(r)
                .map_err(|msg| Error::Manifest(format!("record {i}: {msg}")))?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!(
                    "record {i}: duplicate sample id {:?}",
                    r.id
                )));
            }
        }
        Ok(manifest)
    }

    fn check_record(&self, r: &SampleRecord) -> std::result::Result<(), String> {
        let (s, o) = r.pair;
        if s >= self.states.len() {
            return Err(format!("state index {s} out of range"));
        }
        if o >= self.objects.len() {
            return Err(format!("object index {o} out of range"));
        }
        if r.id.is_empty() || r.id.contains(',') || r.id.contains('\n') {
            return Err(format!("invalid sample id {:?}", r.id));
        }
        let (a, b) = self.pairs.allowed(r.split);
        if !a.contains(&r.pair) && !b.contains(&r.pair) {
            return Err(format!(
                "{} sample carries pair ({} {}) outside the {} pair lists",
                r.split, self.states[s], self.objects[o], r.split
            ));
        }
        Ok(())
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn pairs(&self) -> &SplitPairs {
        &self.pairs
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Seen = train pairs, unseen = test-unseen pairs.
    pub fn space(&self, world: World) -> Result<CompositionSpace> {
        CompositionSpace::new(
            self.states.clone(),
            self.objects.clone(),
            self.pairs.train.clone(),
            self.pairs.test_unseen.clone(),
            world,
        )
    }

    /// Seen = train pairs, unseen = val-unseen pairs.
    pub fn val_space(&self) -> Result<CompositionSpace> {
        CompositionSpace::new(
            self.states.clone(),
            self.objects.clone(),
            self.pairs.train.clone(),
            self.pairs.val_unseen.clone(),
            World::Closed,
        )
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Feature rows and true pairs of one split, in record order.
    pub fn split_data(&self, split: Split) -> Result<(Matrix, Vec<Pair>)> {
        let idx = self.split_indices(split);
        let labels = idx.iter().map(|&i| self.records[i].pair).collect();
        Ok((self.features.select_rows(&idx)?, labels))
    }

    /// SHA-256 per split over its pair lists, sample ids, pairs and feature
    /// bytes, as lowercase hex.
    pub fn split_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for split in Split::ALL {
            let mut h = Sha256::new();
            for (name, list) in self.pairs.lists() {
                if name.starts_with(split.as_str()) {
                    h.update(name.as_bytes());
                    for &(s, o) in list.iter() {
                        h.update(format!("{} {}\n", self.states[s], self.objects[o]).as_bytes());
                    }
                }
            }
            for i in self.split_indices(split) {
                let r = &self.records[i];
                h.update(format!("{},{},{}\n", r.id, r.pair.0, r.pair.1).as_bytes());
                for v in self.features.row(i) {
                    h.update(v.to_le_bytes());
                }
            }
            out.insert(split.as_str().to_string(), hex::encode(h.finalize()));
        }
        out
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_names(path: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in read_text(path)?.lines().enumerate() {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        if name.split_whitespace().count() != 1 {
            return Err(parse_err(
                path,
                i + 1,
                format!("name {name:?} contains whitespace"),
            ));
        }
        if !seen.insert(name.to_string()) {
            return Err(parse_err(path, i + 1, format!("duplicate name {name:?}")));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(parse_err(path, 0, "no names"));
    }
    Ok(names)
}

fn read_pairs(path: &Path, states: &[String], objects: &[String]) -> Result<Vec<Pair>> {
    let lookup = |names: &[String], n: &str| names.iter().position(|x| x == n);
    let mut out = Vec::new();
    let mut set = HashSet::new();
    for (i, raw) in read_text(path)?.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(parse_err(path, i + 1, "expected `state object`"));
        }
        let s = lookup(states, parts[0])
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown state {:?}", parts[0])))?;
        let o = lookup(objects, parts[1])
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown object {:?}", parts[1])))?;
        if !set.insert((s, o)) {
            return Err(parse_err(path, i + 1, format!("duplicate pair {line:?}")));
        }
        out.push((s, o));
    }
    Ok(out)
}

/// Reads and validates a manifest directory. Every invariant violation in
/// the index is reported with its file and line.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let states = read_names(&dir.join("states.txt"))?;
    let objects = read_names(&dir.join("objects.txt"))?;
    let mut lists: Vec<Vec<Pair>> = Vec::new();
    for stem in [
        "train",
        "val_seen",
        "val_unseen",
        "test_seen",
        "test_unseen",
    ] {
        lists.push(read_pairs(
            &dir.join(format!("pairs_{stem}.txt")),
            &states,
            &objects,
        )?);
    }
    let [train, val_seen, val_unseen, test_seen, test_unseen]: [Vec<Pair>; 5] =
        lists.try_into().expect("five pair lists");
    let pairs = SplitPairs {
        train,
        val_seen,
        val_unseen,
        test_seen,
        test_unseen,
    };

    let index_path = dir.join("index.csv");
    let index = read_text(&index_path)?;
    let mut lines = index.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == INDEX_HEADER => {}
        _ => {
            return Err(parse_err(
                &index_path,
                1,
                format!("header must be `{INDEX_HEADER}`"),
            ))
        }
    }
    let mut rows: Vec<(usize, SampleRecord, u64)> = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(
                &index_path,
                i + 1,
                format!("expected 5 fields, found {}", f.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| parse_err(&index_path, i + 1, format!("bad {what} {s:?}")))
        };
        let offset = num(f[1], "offset")?;
        let state = num(f[2], "state index")? as usize;
        let object = num(f[3], "object index")? as usize;
        let split: Split = f[4]
            .trim()
            .parse()
            .map_err(|e: String| parse_err(&index_path, i + 1, e))?;
        rows.push((
            i + 1,
            SampleRecord {
                id: f[0].trim().to_string(),
                pair: (state, object),
                split,
            },
            offset,
        ));
    }
    if rows.is_empty() {
        return Err(parse_err(&index_path, 2, "no samples"));
    }

    let feat_path = dir.join("features.bin");
    let bytes = fs::read(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    let per_row = 8 * rows.len();
    if bytes.is_empty() || bytes.len() % per_row != 0 {
        return Err(Error::Manifest(format!(
            "{}: {} bytes is not a positive multiple of 8 x {} samples",
            feat_path.display(),
            bytes.len(),
            rows.len()
        )));
    }
    let dim = bytes.len() / per_row;
    let stride = (8 * dim) as u64;

    // Validate records against the pair lists with line numbers before
    // building the manifest.
    let probe = Manifest {
        states: states.clone(),
        objects: objects.clone(),
        pairs: pairs.clone(),
        records: Vec::new(),
        features: Matrix::zeros(0, dim),
    };
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut offsets = HashSet::new();
    let mut ids = HashSet::new();
    for (line, rec, offset) in &rows {
        probe
            .check_record(rec)
            .map_err(|m| parse_err(&index_path, *line, m))?;
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(
                &index_path,
                *line,
                format!("duplicate sample id {:?}", rec.id),
            ));
        }
        if offset % stride != 0 || offset + stride > bytes.len() as u64 {
            return Err(parse_err(
                &index_path,
                *line,
                format!(
                    "offset {offset} is not a multiple of {stride} inside {} bytes",
                    bytes.len()
                ),
            ));
        }
        if !offsets.insert(*offset) {
            return Err(parse_err(
                &index_path,
                *line,
                format!("offset {offset} used twice"),
            ));
        }
        let start = *offset as usize;
        for k in 0..dim {
            let b: [u8; 8] = bytes[start + 8 * k..start + 8 * k + 8]
                .try_into()
                .expect("8 bytes");
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(parse_err(
                    &index_path,
                    *line,
                    format!("non-finite feature at component {k}"),
                ));
            }
            data.push(v);
        }
    }
    let features = Matrix::from_vec(rows.len(), dim, data)?;
    Manifest::new(
        states,
        objects,
        pairs,
        rows.into_iter().map(|(_, r, _)| r).collect(),
        features,
    )
}

/// Writes `manifest` to `dir` (created if needed). Samples are stored in
/// record order, so sample `i` sits at byte offset `8 * dim * i`.
pub fn write_manifest(manifest: &Manifest, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, contents: &[u8]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    };
    write("states.txt", (manifest.states.join("\n") + "\n").as_bytes())?;
    write(
        "objects.txt",
        (manifest.objects.join("\n") + "\n").as_bytes(),
    )?;
    for (stem, list) in manifest.pairs.lists() {
        let mut text = String::new();
        for &(s, o) in list.iter() {
            text.push_str(&format!("{} {}\n", manifest.states[s], manifest.objects[o]));
        }
        write(&format!("pairs_{stem}.txt"), text.as_bytes())?;
    }
    let dim = manifest.feature_dim();
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    let mut blob = Vec::with_capacity(manifest.features.len() * 8);
    for (i, r) in manifest.records.iter().enumerate() {
        index.push_str(&format!(
            "{},{},{},{},{}\n",
            r.id,
            8 * dim * i,
            r.pair.0,
            r.pair.1,
            r.split
        ));
        for v in manifest.features.row(i) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write("index.csv", index.as_bytes())?;
    write("features.bin", &blob)
}
