//! Token visit orders, reveal schedulers and the ordered group partition
//! `Z_0 .. Z_{m-1}` that a sampler walks through.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderKind {
    Halton,
    Raster,
    Spiral,
    Random,
}

impl OrderKind {
    pub const ALL: [OrderKind; 4] = [
        OrderKind::Halton,
        OrderKind::Raster,
        OrderKind::Spiral,
        OrderKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OrderKind::Halton => "halton",
            OrderKind::Raster => "raster",
            OrderKind::Spiral => "spiral",
            OrderKind::Random => "random",
        }
    }
}

impl fmt::Display for OrderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown order kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderPlan {
    pub order: Vec<usize>,
    pub kind: OrderKind,
    pub roll_offset: usize,
}

impl OrderPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Rank of every position in the visit order (`rank[order[k]] == k`).
    pub fn ranks(&self) -> Vec<usize> {
        let mut rank = vec![0; self.order.len()];
        for (k, &p) in self.order.iter().enumerate() {
            rank[p] = k;
        }
        rank
    }
}

/// Radical inverse of `index` in `base` as an exact fraction `num / den`.
fn radical_inverse(mut index: u64, base: u64) -> (u64, u64) {
    let mut num = 0u64;
    let mut den = 1u64;
    while index > 0 {
        num = num * base + index % base;
        den *= base;
        index /= base;
    }
    (num, den)
}

pub fn van_der_corput(index: u64, base: u64) -> Result<f64> {
    if base < 2 {
        return Err(Error::invalid(format!("base must be >= 2, got {base}")));
    }
    if index == 0 {
        return Err(Error::invalid("van der Corput index starts at 1"));
    }
    let (num, den) = radical_inverse(index, base);
    Ok(num as f64 / den as f64)
}

/// Halton visit order over an `h x w` grid: point `i` of the (2, 3) Halton
/// sequence lands in cell `(floor(u * w), floor(v * h))`; cells already
/// visited are skipped until every cell has been emitted once.
pub fn halton_order(h: usize, w: usize) -> OrderPlan {
    let n = h * w;
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut i = 1u64;
    while order.len() < n {
        let (un, ud) = radical_inverse(i, 2);
        let (vn, vd) = radical_inverse(i, 3);
        let x = (un as u128 * w as u128 / ud as u128) as usize;
        let y = (vn as u128 * h as u128 / vd as u128) as usize;
        let p = y * w + x;
        if !seen[p] {
            seen[p] = true;
            order.push(p);
        }
        i += 1;
    }
    OrderPlan {
        order,
        kind: OrderKind::Halton,
        roll_offset: 0,
    }
}

pub fn raster_order(h: usize, w: usize) -> OrderPlan {
    OrderPlan {
        order: (0..h * w).collect(),
        kind: OrderKind::Raster,
        roll_offset: 0,
    }
}

/// Clockwise inward spiral starting at the top-left corner.
pub fn spiral_order(h: usize, w: usize) -> OrderPlan {
    let mut order = Vec::with_capacity(h * w);
    let (mut top, mut left) = (0isize, 0isize);
    let (mut bottom, mut right) = (h as isize - 1, w as isize - 1);
    while top <= bottom && left <= right {
        for x in left..=right {
            order.push(top as usize * w + x as usize);
        }
        for y in top + 1..=bottom {
            order.push(y as usize * w + right as usize);
        }
        if top < bottom {
            for x in (left..right).rev() {
                order.push(bottom as usize * w + x as usize);
            }
        }
        if left < right {
            for y in (top + 1..bottom).rev() {
                order.push(y as usize * w + left as usize);
            }
        }
        top += 1;
        left += 1;
        bottom -= 1;
        right -= 1;
    }
    OrderPlan {
        order,
        kind: OrderKind::Spiral,
        roll_offset: 0,
    }
}

pub fn random_order(h: usize, w: usize, seed: u64) -> OrderPlan {
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    OrderPlan {
        order,
        kind: OrderKind::Random,
        roll_offset: 0,
    }
}

pub fn build_order(kind: OrderKind, h: usize, w: usize, seed: u64) -> OrderPlan {
    match kind {
        OrderKind::Halton => halton_order(h, w),
        OrderKind::Raster => raster_order(h, w),
        OrderKind::Spiral => spiral_order(h, w),
        OrderKind::Random => random_order(h, w, seed),
    }
}

/// Rotates the visit order left by `offset` (taken modulo `n`).
pub fn roll(plan: &OrderPlan, offset: usize) -> OrderPlan {
    let n = plan.order.len();
    if n == 0 {
        return plan.clone();
    }
    let k = offset % n;
    let mut order = plan.order.clone();
    order.rotate_left(k);
    OrderPlan {
        order,
        kind: plan.kind,
        roll_offset: (plan.roll_offset + k) % n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchedulerKind {
    Arccos,
    Cosine,
    Square,
    Linear,
    Root,
    Constant,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 6] = [
        SchedulerKind::Arccos,
        SchedulerKind::Cosine,
        SchedulerKind::Square,
        SchedulerKind::Linear,
        SchedulerKind::Root,
        SchedulerKind::Constant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Arccos => "arccos",
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::Square => "square",
            SchedulerKind::Linear => "linear",
            SchedulerKind::Root => "root",
            SchedulerKind::Constant => "constant",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scheduler `{s}`")))
    }
}

/// Fraction of tokens still masked at progress `t`.
///
/// `Constant` has no curve of its own; its equal-split group sizes are what a
/// linear ratio would produce, so the linear ratio is returned for it.
pub fn mask_ratio(t: f64, kind: SchedulerKind) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("progress t = {t} outside [0, 1]")));
    }
    let r = match kind {
        SchedulerKind::Arccos => (2.0 / PI) * t.acos(),
        SchedulerKind::Cosine => (PI * t / 2.0).cos(),
        SchedulerKind::Square => 1.0 - t * t,
        SchedulerKind::Linear | SchedulerKind::Constant => 1.0 - t,
        SchedulerKind::Root => 1.0 - t.sqrt(),
    };
    Ok(r.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    pub steps: usize,
    pub group_sizes: Vec<usize>,
    pub kind: SchedulerKind,
}

impl StepSchedule {
    pub fn total(&self) -> usize {
        self.group_sizes.iter().sum()
    }
}

/// Integer group sizes for `m` reveal steps over `n` tokens.
///
/// Continuous sizes `n * (r(s/m) - r((s+1)/m))` are rounded by largest
/// remainder (ties go to the later step), then any empty group borrows one
/// token from the currently largest group.
pub fn group_sizes(n: usize, m: usize, kind: SchedulerKind) -> Result<StepSchedule> {
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "need 1 <= steps <= tokens, got steps = {m}, tokens = {n}"
        )));
    }
    let sizes = if kind == SchedulerKind::Constant {
        let base = n / m;
        let extra = n % m;
        (0..m).map(|s| base + usize::from(s >= m - extra)).collect()
    } else {
        let mut raw = Vec::with_capacity(m);
        for s in 0..m {
            let a = mask_ratio(s as f64 / m as f64, kind)?;
            let b = mask_ratio((s + 1) as f64 / m as f64, kind)?;
            raw.push((n as f64 * (a - b)).max(0.0));
        }
        let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        let mut by_remainder: Vec<usize> = (0..m).collect();
        by_remainder.sort_by(|&a, &b| {
            let fa = raw[a] - raw[a].floor();
            let fb = raw[b] - raw[b].floor();
            fb.total_cmp(&fa).then(b.cmp(&a))
        });
        if assigned <= n {
            for &s in by_remainder.iter().cycle().take(n - assigned) {
                sizes[s] += 1;
            }
        } else {
            // Only reachable through float drift; trim from the largest groups.
            for _ in 0..assigned - n {
                let s = largest_index(&sizes);
                sizes[s] -= 1;
            }
        }
        sizes
    };
    let mut sizes = sizes;
    while let Some(empty) = sizes.iter().position(|&g| g == 0) {
        let donor = largest_index(&sizes);
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
    debug_assert_eq!(sizes.iter().sum::<usize>(), n);
    Ok(StepSchedule {
        steps: m,
        group_sizes: sizes,
        kind,
    })
}

fn largest_index(sizes: &[usize]) -> usize {
    let max = *sizes.iter().max().expect("non-empty schedule");
    sizes.iter().position(|&g| g == max).expect("max exists")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: Vec<Vec<usize>>,
}

impl GroupPartition {
    pub fn steps(&self) -> usize {
        self.groups.len()
    }

    /// Positions in groups `0..s`, i.e. the context before step `s`.
    pub fn prefix(&self, s: usize) -> Vec<usize> {
        self.groups[..s].iter().flatten().copied().collect()
    }

    /// Positions in groups `s..`.
    pub fn suffix(&self, s: usize) -> Vec<usize> {
        self.groups[s..].iter().flatten().copied().collect()
    }
}

pub fn partition(plan: &OrderPlan, schedule: &StepSchedule) -> Result<GroupPartition> {
    if plan.order.len() != schedule.total() {
        return Err(Error::invalid(format!(
            "order covers {} positions but schedule sums to {}",
            plan.order.len(),
            schedule.total()
        )));
    }
    let mut groups = Vec::with_capacity(schedule.steps);
    let mut start = 0;
    for &g in &schedule.group_sizes {
        groups.push(plan.order[start..start + g].to_vec());
        start += g;
    }
    Ok(GroupPartition { groups })
}
