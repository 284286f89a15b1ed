//! Part catalog, connected assembly states and part differences.
//!
//! A state is a bitmask over part IDs `1..=P` (bit `id - 1`). Every valid
//! state contains the base part and induces a connected subgraph of the
//! attachment graph.

use std::collections::BTreeSet;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Quaternion, Vec3};

/// Default desk-scale catalog shipped with the crate.
pub const DEFAULT_CATALOG: &str = include_str!("../assets/default_catalog.toml");

/// Rejection-sampling cap for [`sample_state_pair`].
pub const PAIR_RETRY_CAP: usize = 100_000;

pub type PartId = u16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("catalog parse error: {0}")]
    Parse(String),
    #[error("catalog validation failed: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("generation failed: {0}")]
    Generation(String),
}

/// Axis-aligned box in a part's local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeom {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDef {
    pub id: PartId,
    pub name: String,
    pub color: [u8; 3],
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_rotation")]
    pub rotation: [f64; 4],
    pub boxes: Vec<BoxGeom>,
}

fn identity_rotation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl PartDef {
    pub fn rotation(&self) -> Quaternion {
        Quaternion::from_array(self.rotation)
    }

    /// Local point to assembly frame.
    pub fn place(&self, p: Vec3) -> Vec3 {
        self.rotation().rotate(p) + Vec3::from_array(self.translation)
    }
}

#[derive(Debug, Deserialize)]
struct CatalogDoc {
    base_part: String,
    parts: Vec<PartDef>,
    adjacency: Vec<[String; 2]>,
}

/// Immutable, validated part catalog.
#[derive(Debug, Clone)]
pub struct PartCatalog {
    parts: Vec<PartDef>,
    neighbors: Vec<u64>,
    base: PartId,
    fingerprint: u64,
}

impl PartCatalog {
    pub fn default_catalog() -> Self {
        Self::from_toml(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, AssemblyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AssemblyError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, AssemblyError> {
        let doc: CatalogDoc = toml::from_str(text).map_err(|e| AssemblyError::Parse(e.to_string()))?;
        let mut parts = doc.parts;
        parts.sort_by_key(|p| p.id);
        let count = parts.len();
        if count == 0 {
            return Err(AssemblyError::Validation("catalog has no parts".into()));
        }
        if count > 63 {
            return Err(AssemblyError::Validation(format!("at most 63 parts supported, got {count}")));
        }
        for (i, p) in parts.iter().enumerate() {
            if p.id as usize != i + 1 {
                return Err(AssemblyError::Validation(format!(
                    "part IDs must be dense 1..{count}; found {} at position {}",
                    p.id,
                    i + 1
                )));
            }
            if p.boxes.is_empty() {
                return Err(AssemblyError::Validation(format!("part {} has no boxes", p.name)));
            }
            if p.boxes.iter().any(|b| b.size.iter().any(|&s| !(s > 0.0))) {
                return Err(AssemblyError::Validation(format!("part {} has a box with non-positive extent", p.name)));
            }
            if !Quaternion::from_array(p.rotation).is_unit(1e-6) {
                return Err(AssemblyError::Validation(format!("part {} rotation is not a unit quaternion", p.name)));
            }
        }
        let mut names = BTreeSet::new();
        let mut colors = BTreeSet::new();
        for p in &parts {
            if !names.insert(p.name.as_str()) {
                return Err(AssemblyError::Validation(format!("duplicate part name {}", p.name)));
            }
            if !colors.insert(p.color) {
                return Err(AssemblyError::Validation(format!("part {} reuses color {:?}", p.name, p.color)));
            }
        }
        let lookup = |name: &str| {
            parts
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.id)
                .ok_or_else(|| AssemblyError::Validation(format!("unknown part {name}")))
        };
        let base = lookup(&doc.base_part)
            .map_err(|_| AssemblyError::Validation(format!("base_part {} does not exist", doc.base_part)))?;
        let mut neighbors = vec![0u64; count + 1];
        for [a, b] in &doc.adjacency {
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if ia == ib {
                return Err(AssemblyError::Validation(format!("self-adjacency on {a}")));
            }
            neighbors[ia as usize] |= bit(ib);
            neighbors[ib as usize] |= bit(ia);
        }
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        text.hash(&mut hasher);
        let catalog = PartCatalog { parts, neighbors, base, fingerprint: hasher.finish() };
        let full = catalog.full_mask();
        if catalog.reachable(full) != full {
            let isolated: Vec<_> = catalog
                .ids()
                .filter(|&id| catalog.reachable(full) & bit(id) == 0)
                .map(|id| catalog.name(id).to_string())
                .collect();
            return Err(AssemblyError::Validation(format!(
                "adjacency graph is disconnected; unreachable from base: {}",
                isolated.join(", ")
            )));
        }
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn parts(&self) -> &[PartDef] {
        &self.parts
    }

    pub fn part(&self, id: PartId) -> &PartDef {
        &self.parts[id as usize - 1]
    }

    pub fn name(&self, id: PartId) -> &str {
        &self.part(id).name
    }

    pub fn id_of(&self, name: &str) -> Option<PartId> {
        self.parts.iter().find(|p| p.name == name).map(|p| p.id)
    }

    pub fn base_part(&self) -> PartId {
        self.base
    }

    pub fn ids(&self) -> impl Iterator<Item = PartId> {
        1..=self.parts.len() as PartId
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn adjacent(&self, a: PartId, b: PartId) -> bool {
        self.neighbors[a as usize] & bit(b) != 0
    }

    pub fn full_mask(&self) -> u64 {
        (1u64 << self.parts.len()) - 1
    }

    pub fn full_state(&self) -> AssemblyState {
        self.state(self.full_mask())
    }

    pub fn state(&self, present: u64) -> AssemblyState {
        AssemblyState { present, catalog: self.fingerprint }
    }

    /// Parts of `mask` reachable from the base through parts of `mask`.
    fn reachable(&self, mask: u64) -> u64 {
        if mask & bit(self.base) == 0 {
            return 0;
        }
        let mut seen = bit(self.base);
        let mut frontier = seen;
        while frontier != 0 {
            let mut next = 0;
            for id in BitIter(frontier) {
                next |= self.neighbors[id as usize] & mask;
            }
            frontier = next & !seen;
            seen |= next;
        }
        seen
    }

    /// Base present and present parts connected.
    pub fn is_valid_mask(&self, mask: u64) -> bool {
        mask & !self.full_mask() == 0 && self.reachable(mask) == mask && mask != 0
    }

    pub fn is_valid_state(&self, s: &AssemblyState) -> bool {
        s.catalog == self.fingerprint && self.is_valid_mask(s.present)
    }

    /// Resolves part names to a constraint set, validating both sides.
    pub fn constraints(&self, always: &[&str], never: &[&str]) -> Result<StateConstraints, AssemblyError> {
        let resolve = |names: &[&str]| -> Result<u64, AssemblyError> {
            names.iter().try_fold(0u64, |acc, n| {
                self.id_of(n)
                    .map(|id| acc | bit(id))
                    .ok_or_else(|| AssemblyError::InvalidArgument(format!("unknown part {n}")))
            })
        };
        Ok(StateConstraints { always_present: resolve(always)?, never_present: resolve(never)? })
    }

    /// Every valid state satisfying `constraints`, ascending by bitmask.
    pub fn enumerate_states(&self, constraints: &StateConstraints) -> Vec<AssemblyState> {
        let rest = self.full_mask() & !bit(self.base);
        let mut out = Vec::new();
        // iterate all subsets of the non-base parts
        let mut sub = 0u64;
        loop {
            let mask = sub | bit(self.base);
            if constraints.admits(mask) && self.is_valid_mask(mask) {
                out.push(self.state(mask));
            }
            if sub == rest {
                break;
            }
            sub = (sub.wrapping_sub(rest)) & rest;
        }
        out.sort_by_key(|s| s.present);
        out
    }
}

#[inline]
pub fn bit(id: PartId) -> u64 {
    1u64 << (id - 1)
}

/// Iterates part IDs set in a bitmask, ascending.
#[derive(Debug, Clone, Copy)]
pub struct BitIter(pub u64);

impl Iterator for BitIter {
    type Item = PartId;
    fn next(&mut self) -> Option<PartId> {
        if self.0 == 0 {
            return None;
        }
        let tz = self.0.trailing_zeros();
        self.0 &= self.0 - 1;
        Some(tz as PartId + 1)
    }
}

/// Set of present parts of one catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AssemblyState {
    pub present: u64,
    catalog: u64,
}

impl AssemblyState {
    pub fn contains(&self, id: PartId) -> bool {
        self.present & bit(id) != 0
    }

    pub fn parts(&self) -> BitIter {
        BitIter(self.present)
    }

    pub fn count(&self) -> usize {
        self.present.count_ones() as usize
    }

    pub fn catalog_fingerprint(&self) -> u64 {
        self.catalog
    }
}

/// Parts required in, or excluded from, every sampled state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StateConstraints {
    pub always_present: u64,
    pub never_present: u64,
}

impl StateConstraints {
    pub fn admits(&self, mask: u64) -> bool {
        mask & self.always_present == self.always_present && mask & self.never_present == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartDiff {
    pub only_in_a: BTreeSet<PartId>,
    pub only_in_b: BTreeSet<PartId>,
}

impl PartDiff {
    pub fn count(&self) -> usize {
        self.only_in_a.len() + self.only_in_b.len()
    }

    pub fn contains(&self, id: PartId) -> bool {
        self.only_in_a.contains(&id) || self.only_in_b.contains(&id)
    }

    pub fn swapped(&self) -> PartDiff {
        PartDiff { only_in_a: self.only_in_b.clone(), only_in_b: self.only_in_a.clone() }
    }
}

pub fn part_diff(a: &AssemblyState, b: &AssemblyState) -> Result<PartDiff, AssemblyError> {
    if a.catalog != b.catalog {
        return Err(AssemblyError::InvalidArgument("states come from different catalogs".into()));
    }
    Ok(PartDiff {
        only_in_a: BitIter(a.present & !b.present).collect(),
        only_in_b: BitIter(b.present & !a.present).collect(),
    })
}

/// Starting set for constrained sampling; errors when removing the
/// never-present parts disconnects the assembly or conflicts with the
/// always-present set.
fn constrained_start(catalog: &PartCatalog, c: &StateConstraints) -> Result<u64, AssemblyError> {
    if c.always_present & c.never_present != 0 {
        return Err(AssemblyError::Generation("a part is both always and never present".into()));
    }
    if c.never_present & bit(catalog.base_part()) != 0 {
        return Err(AssemblyError::Generation("base part cannot be never-present".into()));
    }
    let start = catalog.full_mask() & !c.never_present;
    if !catalog.is_valid_mask(start) {
        return Err(AssemblyError::Generation("never-present parts disconnect the assembly".into()));
    }
    Ok(start)
}

/// Removes up to `steps` uniformly chosen removable parts from `start`.
fn remove_parts<R: Rng + ?Sized>(
    catalog: &PartCatalog,
    start: u64,
    locked: u64,
    steps: usize,
    rng: &mut R,
) -> u64 {
    let mut mask = start;
    for _ in 0..steps {
        let removable: Vec<PartId> = BitIter(mask & !locked)
            .filter(|&id| catalog.is_valid_mask(mask & !bit(id)))
            .collect();
        if removable.is_empty() {
            break;
        }
        mask &= !bit(removable[rng.gen_range(0..removable.len())]);
    }
    mask
}

/// Samples a connected state by random removals from the full assembly.
pub fn sample_state<R: Rng + ?Sized>(catalog: &PartCatalog, rng: &mut R) -> AssemblyState {
    sample_state_constrained(catalog, &StateConstraints::default(), rng).expect("unconstrained sampling is feasible")
}

/// Removal-step count is uniform over `0..P`.
pub fn sample_state_constrained<R: Rng + ?Sized>(
    catalog: &PartCatalog,
    constraints: &StateConstraints,
    rng: &mut R,
) -> Result<AssemblyState, AssemblyError> {
    let start = constrained_start(catalog, constraints)?;
    let steps = rng.gen_range(0..catalog.len());
    Ok(sample_with_steps(catalog, constraints, start, steps, rng))
}

fn sample_with_steps<R: Rng + ?Sized>(
    catalog: &PartCatalog,
    constraints: &StateConstraints,
    start: u64,
    steps: usize,
    rng: &mut R,
) -> AssemblyState {
    let locked = constraints.always_present | bit(catalog.base_part());
    catalog.state(remove_parts(catalog, start, locked, steps, rng))
}

/// Exposed for the zero-step edge case.
pub fn sample_state_steps<R: Rng + ?Sized>(catalog: &PartCatalog, steps: usize, rng: &mut R) -> AssemblyState {
    sample_with_steps(catalog, &StateConstraints::default(), catalog.full_mask(), steps, rng)
}

/// Draws a state pair whose part-difference count lies in `[d_min, d_max]`,
/// both states satisfying `constraints` and the pair accepted by `accept`.
pub fn sample_state_pair_filtered<R: Rng + ?Sized>(
    catalog: &PartCatalog,
    d_min: usize,
    d_max: usize,
    constraints: &StateConstraints,
    rng: &mut R,
    accept: impl Fn(&AssemblyState, &AssemblyState) -> bool,
) -> Result<(AssemblyState, AssemblyState), AssemblyError> {
    if d_min > d_max || d_max > catalog.len() {
        return Err(AssemblyError::InvalidArgument(format!(
            "need 0 <= d_min <= d_max <= {}, got [{d_min}, {d_max}]",
            catalog.len()
        )));
    }
    for _ in 0..PAIR_RETRY_CAP {
        let a = sample_state_constrained(catalog, constraints, rng)?;
        let b = if d_max == 0 { a } else { sample_state_constrained(catalog, constraints, rng)? };
        let d = (a.present ^ b.present).count_ones() as usize;
        if (d_min..=d_max).contains(&d) && accept(&a, &b) {
            return Ok((a, b));
        }
    }
    Err(AssemblyError::Generation(format!(
        "no state pair with {d_min}..={d_max} part differences after {PAIR_RETRY_CAP} attempts"
    )))
}

pub fn sample_state_pair<R: Rng + ?Sized>(
    catalog: &PartCatalog,
    d_min: usize,
    d_max: usize,
    constraints: &StateConstraints,
    rng: &mut R,
) -> Result<(AssemblyState, AssemblyState), AssemblyError> {
    sample_state_pair_filtered(catalog, d_min, d_max, constraints, rng, |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashSet, VecDeque};

    fn cat() -> PartCatalog {
        PartCatalog::default_catalog()
    }

    /// Independent BFS over explicit adjacency queries.
    fn connected_oracle(c: &PartCatalog, s: &AssemblyState) -> bool {
        let present: Vec<PartId> = c.ids().filter(|&i| s.contains(i)).collect();
        if !s.contains(c.base_part()) {
            return false;
        }
        let mut seen = HashSet::from([c.base_part()]);
        let mut q = VecDeque::from([c.base_part()]);
        while let Some(u) = q.pop_front() {
            for &v in &present {
                if c.adjacent(u, v) && seen.insert(v) {
                    q.push_back(v);
                }
            }
        }
        seen.len() == present.len()
    }

    #[test]
    fn default_catalog_shape() {
        let c = cat();
        assert_eq!(c.len(), 16);
        assert_eq!(c.name(c.base_part()), "chassis");
        for name in ["wheel_3", "wheel_4", "pulley", "front_bracket"] {
            assert!(c.id_of(name).is_some(), "{name}");
        }
    }

    #[test]
    fn isolated_part_rejected() {
        let text = DEFAULT_CATALOG.replace("[\"roof\", \"fastener_4\"],", "");
        match PartCatalog::from_toml(&text) {
            Err(AssemblyError::Validation(msg)) => assert!(msg.contains("fastener_4"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_base_rejected() {
        let text = DEFAULT_CATALOG.replace("base_part = \"chassis\"", "base_part = \"frame\"");
        assert!(matches!(PartCatalog::from_toml(&text), Err(AssemblyError::Validation(m)) if m.contains("base_part")));
        let text = DEFAULT_CATALOG.replace("base_part = \"chassis\"", "");
        assert!(matches!(PartCatalog::from_toml(&text), Err(AssemblyError::Parse(_))));
    }

    #[test]
    fn bad_extent_rejected() {
        let text = DEFAULT_CATALOG.replace("size = [0.08, 1.0, 0.08]", "size = [0.08, 0.0, 0.08]");
        assert!(matches!(PartCatalog::from_toml(&text), Err(AssemblyError::Validation(_))));
    }

    #[test]
    fn zero_steps_is_full() {
        let c = cat();
        let s = sample_state_steps(&c, 0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s, c.full_state());
    }

    #[test]
    fn samples_are_connected_and_diverse() {
        let c = cat();
        let support: HashSet<u64> =
            c.enumerate_states(&StateConstraints::default()).iter().map(|s| s.present).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let s = sample_state(&c, &mut rng);
            assert!(connected_oracle(&c, &s));
            assert!(support.contains(&s.present));
            seen.insert(s.present);
        }
        assert!(seen.len() >= 100, "only {} distinct states", seen.len());
    }

    #[test]
    fn enumeration_matches_oracle() {
        let c = cat();
        let listed = c.enumerate_states(&StateConstraints::default());
        let brute: Vec<u64> = (0..(1u64 << 16))
            .filter(|&m| m != 0 && connected_oracle(&c, &c.state(m)))
            .collect();
        assert_eq!(listed.iter().map(|s| s.present).collect::<Vec<_>>(), brute);
        // tree attachment graph: product formula gives 2625 rooted subtrees
        assert_eq!(brute.len(), 2625);
    }

    #[test]
    fn part_diff_examples() {
        let c = cat();
        let full = c.full_state();
        assert_eq!(part_diff(&full, &full).unwrap(), PartDiff::default());
        let w3 = c.id_of("wheel_3").unwrap();
        let minus = c.state(full.present & !bit(w3));
        let d = part_diff(&full, &minus).unwrap();
        assert_eq!(d.only_in_a, BTreeSet::from([w3]));
        assert!(d.only_in_b.is_empty());
    }

    #[test]
    fn part_diff_catalog_mismatch() {
        let c = cat();
        let other = PartCatalog::from_toml(&format!("{DEFAULT_CATALOG}\n# variant")).unwrap();
        assert!(part_diff(&c.full_state(), &other.full_state()).is_err());
    }

    #[test]
    fn part_diff_matches_set_algebra() {
        let c = cat();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = sample_state(&c, &mut rng);
            let b = sample_state(&c, &mut rng);
            let sa: HashSet<PartId> = c.ids().filter(|&i| a.contains(i)).collect();
            let sb: HashSet<PartId> = c.ids().filter(|&i| b.contains(i)).collect();
            let d = part_diff(&a, &b).unwrap();
            assert_eq!(d.count(), sa.symmetric_difference(&sb).count());
            assert!(d.only_in_a.is_disjoint(&d.only_in_b));
            assert_eq!(part_diff(&b, &a).unwrap(), d.swapped());
        }
    }

    #[test]
    fn pair_bounds_hold() {
        let c = cat();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let none = StateConstraints::default();
        let (a, b) = sample_state_pair(&c, 0, 0, &none, &mut rng).unwrap();
        assert_eq!(a, b);
        for _ in 0..10_000 {
            let (a, b) = sample_state_pair(&c, 1, 6, &none, &mut rng).unwrap();
            let d = part_diff(&a, &b).unwrap().count();
            assert!((1..=6).contains(&d));
        }
    }

    #[test]
    fn pair_constraints_hold() {
        let c = cat();
        let cons = c.constraints(&["front_bracket"], &["pulley", "wheel_4"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let (a, b) = sample_state_pair(&c, 1, 6, &cons, &mut rng).unwrap();
            for s in [a, b] {
                assert!(!s.contains(c.id_of("pulley").unwrap()));
                assert!(!s.contains(c.id_of("wheel_4").unwrap()));
                assert!(s.contains(c.id_of("front_bracket").unwrap()));
                assert!(connected_oracle(&c, &s));
            }
        }
    }

    #[test]
    fn infeasible_constraints() {
        let c = cat();
        let cons = c.constraints(&[], &["axle_front"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(sample_state_pair(&c, 1, 6, &cons, &mut rng), Err(AssemblyError::Generation(_))));
        let cons = c.constraints(&["wheel_1"], &["axle_front"]).unwrap();
        assert!(matches!(sample_state_pair(&c, 1, 6, &cons, &mut rng), Err(AssemblyError::Generation(_))));
        assert!(sample_state_pair(&c, 5, 2, &StateConstraints::default(), &mut rng).is_err());
    }
}
