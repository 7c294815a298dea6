//! Binary branching Brownian motion.
//!
//! Two engines share one sampling scheme. [`simulate_bbm`] keeps every
//! particle's path and answers queries afterwards; [`StreamEngine`] walks the
//! genealogy depth first and accumulates only the requested statistics, which
//! lets it drop subtrees that can no longer contribute.
//!
//! Each particle owns a generator derived from its heap label (root 1,
//! children `2k` and `2k + 1`). It first draws its lifetime, then one normal
//! per point of its schedule: the grid points strictly inside its life,
//! followed by its death time (or the horizon). Two engines given the same
//! seed therefore produce the same particle paths whenever both step on the
//! grid.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::barriers::{Barrier, Curve, Window};
use crate::bessel::normal_mass;
use crate::error::{Error, Result};
use crate::stochastic::{exp1, mix64, normal, step_crosses, SeedSpec, TimeGrid};

pub const DEFAULT_CAP: u64 = 10_000_000;

const ROOT_LABEL: u128 = 1;

#[inline]
fn child_label(label: u128, which: u128) -> u128 {
    if label >> 126 == 0 {
        (label << 1) | which
    } else {
        // past 126 generations the heap numbering no longer fits; continue
        // with hashed labels, kept in the upper half of the label space
        let hi = mix64((label >> 64) as u64 ^ mix64(label as u64 ^ which as u64));
        let lo = mix64(hi ^ (which as u64) ^ 0x2545_F491_4F6C_DD1D);
        (1u128 << 127) | (u128::from(hi >> 1) << 64) | u128::from(lo)
    }
}

/// Next schedule point after grid index `i` for a life ending at `end`.
#[inline]
fn next_point(grid: &TimeGrid, i: usize, end: f64) -> (f64, Option<usize>) {
    if i <= grid.n_steps {
        let g = grid.time(i);
        if g < end {
            return (g, Some(i));
        }
        if g == end {
            return (end, Some(i));
        }
    }
    (end, None)
}

/// One particle of a simulated tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub label: u128,
    pub birth_time: f64,
    /// Branching time, or the horizon for particles still alive there.
    pub end_time: f64,
    pub branched: bool,
    pub birth_position: f64,
    /// Grid index of `grid_values[0]`.
    pub first_grid_index: usize,
    pub grid_values: Vec<f64>,
    pub end_position: f64,
}

impl ParticleRecord {
    /// Position at grid index `g`, if the particle's life covers that point.
    #[inline]
    pub fn value_at_index(&self, g: usize) -> Option<f64> {
        if g == 0 && self.parent.is_none() {
            return Some(self.birth_position);
        }
        g.checked_sub(self.first_grid_index)
            .and_then(|k| self.grid_values.get(k).copied())
    }

    /// Path points after birth, in schedule order, with their step index.
    pub fn steps<'a>(&'a self, grid: &'a TimeGrid) -> impl Iterator<Item = (f64, f64)> + 'a {
        let on_grid = (0..self.grid_values.len())
            .map(move |k| (grid.time(self.first_grid_index + k), self.grid_values[k]));
        let last_grid = self
            .grid_values
            .len()
            .checked_sub(1)
            .map(|k| grid.time(self.first_grid_index + k));
        let tail = (last_grid != Some(self.end_time)).then_some((self.end_time, self.end_position));
        on_grid.chain(tail)
    }
}

/// A fully recorded realization up to `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleTree {
    pub records: Vec<ParticleRecord>,
    pub horizon: f64,
    pub grid: TimeGrid,
    pub seed: SeedSpec,
    /// Set when the particle cap stopped the simulation early.
    pub truncated: bool,
}

fn check_run_params(horizon: f64, dt: f64, cap: u64) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::arg("horizon", format!("must be positive, got {horizon}")));
    }
    if cap == 0 {
        return Err(Error::arg("cap", "must be at least 1"));
    }
    TimeGrid::covering(horizon, dt)
}

/// Simulates one tree, recording every particle's grid path.
pub fn simulate_bbm(horizon: f64, dt: f64, seed: SeedSpec, cap: u64) -> Result<ParticleTree> {
    let grid = check_run_params(horizon, dt, cap)?;
    let mut records: Vec<ParticleRecord> = Vec::new();
    let mut stack = vec![(ROOT_LABEL, 0.0f64, 0.0f64, None::<usize>)];
    let mut created: u64 = 1;
    let mut truncated = false;
    while let Some((label, birth, x, parent)) = stack.pop() {
        let mut rng = seed.particle_rng(label);
        let death = birth + exp1(&mut rng);
        let branched = death < horizon;
        let end = if branched { death } else { horizon };
        let first = grid.first_index_after(birth);
        let mut values = Vec::new();
        let (mut s0, mut x0, mut i) = (birth, x, first);
        loop {
            let (s1, gi) = next_point(&grid, i, end);
            let x1 = x0 + (s1 - s0).sqrt() * normal(&mut rng);
            if gi.is_some() {
                values.push(x1);
            }
            s0 = s1;
            x0 = x1;
            i += 1;
            if s1 >= end {
                break;
            }
        }
        let id = records.len();
        records.push(ParticleRecord {
            id,
            parent,
            label,
            birth_time: birth,
            end_time: end,
            branched,
            birth_position: x,
            first_grid_index: first,
            grid_values: values,
            end_position: x0,
        });
        if branched {
            if created + 2 > cap {
                truncated = true;
                break;
            }
            created += 2;
            stack.push((child_label(label, 1), end, x0, Some(id)));
            stack.push((child_label(label, 0), end, x0, Some(id)));
        }
    }
    Ok(ParticleTree {
        records,
        horizon,
        grid,
        seed,
        truncated,
    })
}

fn grid_index(tree: &ParticleTree, t: f64) -> Result<usize> {
    if !(t >= 0.0 && t <= tree.horizon) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: format!("[0, {}]", tree.horizon),
        });
    }
    tree.grid.index_of(t).ok_or_else(|| Error::arg("t", format!("{t} is not a grid time")))
}

/// `M_t`, the largest position among particles alive at grid time `t`.
pub fn max_at(tree: &ParticleTree, t: f64) -> Result<f64> {
    let g = grid_index(tree, t)?;
    Ok(tree
        .records
        .iter()
        .filter_map(|r| r.value_at_index(g))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `|N(t)|` at grid time `t`.
pub fn population_at(tree: &ParticleTree, t: f64) -> Result<usize> {
    let g = grid_index(tree, t)?;
    Ok(tree.records.iter().filter(|r| r.value_at_index(g).is_some()).count())
}

/// What to count: particles whose ancestry stays below `barrier` and whose
/// position lands in `window`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountSpec {
    pub barrier: Barrier,
    pub window: Window,
    /// Also kill a step with the Brownian-bridge crossing probability.
    pub bridge_correction: bool,
}

impl CountSpec {
    #[inline]
    fn step_crossed(&self, seed: &SeedSpec, label: u128, j: u32, s0: f64, x0: f64, s1: f64, x1: f64) -> bool {
        let c1 = self.barrier.level(s1);
        if self.bridge_correction {
            let c0 = self.barrier.level(s0);
            step_crosses(seed, label, j, x0, x1, s1 - s0, c0, c1)
        } else {
            x1 > c1
        }
    }

    fn check_horizon(&self, t: f64) -> Result<()> {
        if t > self.barrier.domain_end() {
            return Err(Error::Domain {
                what: "t",
                value: t,
                domain: format!("[0, {}]", self.barrier.domain_end()),
            });
        }
        Ok(())
    }
}

/// Number of particles alive at `t` whose whole ancestral path stayed below
/// the barrier up to `t` and whose position at `t` lies in the window.
pub fn count_below_barrier(tree: &ParticleTree, spec: &CountSpec, t: f64) -> Result<u64> {
    let g = grid_index(tree, t)?;
    spec.check_horizon(t)?;
    let root_ok = 0.0 < spec.barrier.level(0.0);
    if g == 0 {
        return Ok(u64::from(root_ok && spec.window.contains(0.0)));
    }
    let mut ok = vec![false; tree.records.len()];
    let mut count = 0;
    for r in &tree.records {
        let mut alive = match r.parent {
            None => root_ok,
            Some(p) => ok[p],
        };
        if alive {
            let (mut s0, mut x0) = (r.birth_time, r.birth_position);
            for (j, (s1, x1)) in r.steps(&tree.grid).enumerate() {
                if s1 > t {
                    break;
                }
                if spec.step_crossed(&tree.seed, r.label, j as u32, s0, x0, s1, x1) {
                    alive = false;
                    break;
                }
                s0 = s1;
                x0 = x1;
            }
        }
        ok[r.id] = alive;
        if alive {
            if let Some(x) = r.value_at_index(g) {
                count += u64::from(spec.window.contains(x));
            }
        }
    }
    Ok(count)
}

/// Writes one JSON object per particle, one per line.
pub fn write_ndjson<W: Write>(tree: &ParticleTree, mut out: W) -> std::io::Result<()> {
    for r in &tree.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// A barrier count evaluated at one grid time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountTarget {
    pub spec: CountSpec,
    pub t: f64,
}

/// Statistics requested from a streaming run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub horizon: f64,
    pub dt: f64,
    pub cap: u64,
    /// At most 64 counts per run.
    pub targets: Vec<CountTarget>,
    /// Grid times at which `M_t` is recorded.
    pub max_times: Vec<f64>,
    /// Drop a particle from a straight-line count once its expected number
    /// of counted descendants falls below this value.
    pub prune_epsilon: Option<f64>,
    /// Step every particle on the grid even when only maxima are requested.
    pub exact_grid: bool,
}

impl StreamConfig {
    pub fn new(horizon: f64, dt: f64) -> Self {
        StreamConfig {
            horizon,
            dt,
            cap: DEFAULT_CAP,
            targets: Vec::new(),
            max_times: Vec::new(),
            prune_epsilon: None,
            exact_grid: false,
        }
    }
}

/// Result of one streamed tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamOutcome {
    pub counts: Vec<u64>,
    pub maxima: Vec<f64>,
    /// Particles created, including dropped ones.
    pub particles: u64,
    pub truncated: bool,
    /// Sum over dropped particles of their expected contribution to each count.
    pub pruned_mass: Vec<f64>,
}

/// Expected number of descendants at time `u` later of a particle at
/// distance `d` below a line of slope `beta`, counting only those that stay
/// below the line and end at a distance in `[z_lo, z_hi]` from it.
pub fn line_descendant_mass(d: f64, u: f64, beta: f64, z_lo: f64, z_hi: f64) -> f64 {
    if !(d > 0.0) || !(z_hi > z_lo) {
        return 0.0;
    }
    let s = u.sqrt();
    let free = normal_mass((z_lo - d - beta * u) / s, (z_hi - d - beta * u) / s);
    let mirror = (-2.0 * beta * d).exp() * normal_mass((z_lo + d - beta * u) / s, (z_hi + d - beta * u) / s);
    (u.exp() * (free - mirror)).max(0.0)
}

#[derive(Debug, Clone)]
struct PruneTable {
    beta: f64,
    z_lo: f64,
    z_hi: f64,
    d_max: Vec<f64>,
}

impl PruneTable {
    fn build(slope: f64, level_at_t: f64, window: Window, t: f64, index: usize, grid: &TimeGrid, eps: f64) -> Self {
        let z_lo = (level_at_t - window.hi).max(0.0);
        let z_hi = level_at_t - window.lo;
        let mut d_max = Vec::with_capacity(index);
        for g in 0..index {
            let u = t - grid.time(g);
            let m = |d: f64| line_descendant_mass(d, u, slope, z_lo, z_hi);
            let s = u.sqrt();
            let step = s / 20.0;
            let (mut best_d, mut best) = (0.0, 0.0);
            let stop = z_hi.max(0.0) + 10.0 * s;
            let mut d = step;
            while d <= stop {
                let v = m(d);
                if v > best {
                    best = v;
                    best_d = d;
                }
                d += step;
            }
            if best < eps {
                d_max.push(f64::NEG_INFINITY);
                continue;
            }
            let (mut lo, mut hi) = (best_d, best_d + s);
            while m(hi) >= eps {
                lo = hi;
                hi += 2.0 * (hi - best_d);
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if m(mid) >= eps {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            d_max.push(hi);
        }
        PruneTable {
            beta: slope,
            z_lo,
            z_hi,
            d_max,
        }
    }
}

#[derive(Debug, Clone)]
struct PreparedTarget {
    spec: CountSpec,
    t: f64,
    index: usize,
    prune: Option<PruneTable>,
}

/// A validated [`StreamConfig`] with its lookup tables, reusable across seeds.
#[derive(Debug, Clone)]
pub struct StreamEngine {
    config: StreamConfig,
    grid: TimeGrid,
    targets: Vec<PreparedTarget>,
    max_slot: Vec<u32>,
    max_times: Vec<(f64, usize)>,
    last_max_time: f64,
}

struct Pending {
    label: u128,
    birth: f64,
    x: f64,
    mask: u64,
}

impl StreamEngine {
    pub fn new(config: StreamConfig) -> Result<Self> {
        let grid = check_run_params(config.horizon, config.dt, config.cap)?;
        if config.targets.len() > 64 {
            return Err(Error::arg("targets", "at most 64 counts per run"));
        }
        if let Some(eps) = config.prune_epsilon {
            if !(eps > 0.0) {
                return Err(Error::arg("prune_epsilon", format!("must be positive, got {eps}")));
            }
        }
        let on_grid = |t: f64| -> Result<usize> {
            if !(0.0..=config.horizon).contains(&t) {
                return Err(Error::Domain {
                    what: "t",
                    value: t,
                    domain: format!("[0, {}]", config.horizon),
                });
            }
            grid.index_of(t).ok_or_else(|| Error::arg("t", format!("{t} is not a grid time")))
        };
        let mut targets = Vec::with_capacity(config.targets.len());
        for tg in &config.targets {
            let index = on_grid(tg.t)?;
            tg.spec.check_horizon(tg.t)?;
            let prune = match (config.prune_epsilon, tg.spec.barrier) {
                (Some(eps), Barrier::Linear(line)) => Some(PruneTable::build(
                    line.slope,
                    line.level(tg.t),
                    tg.spec.window,
                    tg.t,
                    index,
                    &grid,
                    eps,
                )),
                _ => None,
            };
            targets.push(PreparedTarget {
                spec: tg.spec,
                t: tg.t,
                index,
                prune,
            });
        }
        let mut max_slot = vec![u32::MAX; grid.len()];
        let mut max_times = Vec::with_capacity(config.max_times.len());
        for (slot, &t) in config.max_times.iter().enumerate() {
            let g = on_grid(t)?;
            if max_slot[g] != u32::MAX {
                return Err(Error::arg("max_times", format!("{t} listed twice")));
            }
            max_slot[g] = slot as u32;
            max_times.push((grid.time(g), slot));
        }
        max_times.sort_by(|a, b| a.0.total_cmp(&b.0));
        let last_max_time = max_times.last().map_or(f64::NEG_INFINITY, |m| m.0);
        Ok(StreamEngine {
            config,
            grid,
            targets,
            max_slot,
            max_times,
            last_max_time,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    #[inline]
    #[allow(clippy::too_many_arguments)]
    fn update_targets(
        &self,
        out: &mut StreamOutcome,
        seed: &SeedSpec,
        mask: u64,
        label: u128,
        j: u32,
        (s0, x0): (f64, f64),
        (s1, x1): (f64, f64),
        gi: Option<usize>,
    ) -> u64 {
        let mut left = mask;
        let mut bits = mask;
        while bits != 0 {
            let k = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let bit = 1u64 << k;
            let tg = &self.targets[k];
            if tg.spec.step_crossed(seed, label, j, s0, x0, s1, x1) {
                left &= !bit;
                continue;
            }
            let Some(g) = gi else { continue };
            if g == tg.index {
                out.counts[k] += u64::from(tg.spec.window.contains(x1));
                left &= !bit;
            } else if let Some(p) = &tg.prune {
                let d = tg.spec.barrier.level(s1) - x1;
                if d > p.d_max[g] {
                    out.pruned_mass[k] += line_descendant_mass(d, tg.t - s1, p.beta, p.z_lo, p.z_hi);
                    left &= !bit;
                }
            }
        }
        left
    }

    /// Streams one tree.
    pub fn run(&self, seed: SeedSpec) -> StreamOutcome {
        let horizon = self.config.horizon;
        let n_targets = self.targets.len();
        let mut out = StreamOutcome {
            counts: vec![0; n_targets],
            maxima: vec![f64::NEG_INFINITY; self.max_times.len()],
            particles: 1,
            truncated: false,
            pruned_mass: vec![0.0; n_targets],
        };
        let mut mask = 0u64;
        for (k, tg) in self.targets.iter().enumerate() {
            if 0.0 < tg.spec.barrier.level(0.0) {
                if tg.index == 0 {
                    out.counts[k] += u64::from(tg.spec.window.contains(0.0));
                } else {
                    mask |= 1 << k;
                }
            }
        }
        if self.max_slot[0] != u32::MAX {
            out.maxima[self.max_slot[0] as usize] = 0.0;
        }
        let mut stack = vec![Pending {
            label: ROOT_LABEL,
            birth: 0.0,
            x: 0.0,
            mask,
        }];
        while let Some(p) = stack.pop() {
            let mut rng = seed.particle_rng(p.label);
            let death = p.birth + exp1(&mut rng);
            let branches = death < horizon;
            let end = if branches { death } else { horizon };
            let mut mask = p.mask;
            let (mut s0, mut x0) = (p.birth, p.x);
            if self.config.exact_grid || mask != 0 {
                let mut i = self.grid.first_index_after(p.birth);
                let mut j: u32 = 0;
                loop {
                    let (s1, gi) = next_point(&self.grid, i, end);
                    let x1 = x0 + (s1 - s0).sqrt() * normal(&mut rng);
                    if mask != 0 {
                        mask = self.update_targets(&mut out, &seed, mask, p.label, j, (s0, x0), (s1, x1), gi);
                    }
                    if let Some(g) = gi {
                        let slot = self.max_slot[g];
                        if slot != u32::MAX {
                            let m = &mut out.maxima[slot as usize];
                            *m = m.max(x1);
                        }
                    }
                    s0 = s1;
                    x0 = x1;
                    i += 1;
                    j += 1;
                    if s1 >= end || (mask == 0 && !self.config.exact_grid) {
                        break;
                    }
                }
            }
            if s0 < end {
                if self.last_max_time <= s0 {
                    continue;
                }
                let start = self.max_times.partition_point(|m| m.0 <= s0);
                for &(tm, slot) in &self.max_times[start..] {
                    if tm > end {
                        break;
                    }
                    x0 += (tm - s0).sqrt() * normal(&mut rng);
                    s0 = tm;
                    let m = &mut out.maxima[slot];
                    *m = m.max(x0);
                }
                if s0 < end {
                    x0 += (end - s0).sqrt() * normal(&mut rng);
                }
            }
            if !branches || (mask == 0 && !self.config.exact_grid && self.last_max_time <= end) {
                continue;
            }
            if out.particles + 2 > self.config.cap {
                out.truncated = true;
                break;
            }
            out.particles += 2;
            stack.push(Pending {
                label: child_label(p.label, 1),
                birth: end,
                x: x0,
                mask,
            });
            stack.push(Pending {
                label: child_label(p.label, 0),
                birth: end,
                x: x0,
                mask,
            });
        }
        out
    }
}
