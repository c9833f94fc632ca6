//! Constant-round sorting by rank counting.
//!
//! Items are cut into `B` blocks held by owner machines. Every ordered pair of
//! blocks `(a, c)` meets on one grid machine, which counts for each item of
//! block `a` how many items of block `c` precede it. Summing those counts over
//! `c` gives each item's final rank, after which owners send items straight to
//! their placement machine.
//!
//! Blocks reach the grid through fan-`F` broadcast heaps (one per block, over
//! the `2B - 1` grid machines that need it); counts come back through a
//! fan-`F2` aggregation heap per block row. With memory `s` and item width `w`
//! the block size is about `s / (2 F w)`, so both heaps have constant depth
//! whenever `s` is a fixed power of the input size.
//!
//! Records on the wire are `[index, item...]`; ties on the key are broken by
//! the index, which makes the sort stable.

use std::cmp::Ordering;

use super::layout::{frames, push_frame, records, Layout, Region};
use super::sim::{LocalFault, MachineId, Memory, Outgoing, StepOutput, Word};

/// Rounds a sort stage takes at memory `8 ceil(sqrt n)` for the record
/// widths the protocols use.
pub const SORT_STAGE_ROUNDS: usize = 7;

/// Sizes chosen for one sort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPlan {
    pub items: usize,
    pub key_width: usize,
    /// Item width, not counting the index word.
    pub item_width: usize,
    pub memory: usize,
    /// Broadcast fan-out.
    pub fan: usize,
    /// Items per block.
    pub block: usize,
    pub blocks: usize,
    /// Aggregation fan-in.
    pub agg_fan: usize,
    /// Items per placement machine.
    pub per_placement: usize,
    pub broadcast_depth: usize,
    pub agg_depth: usize,
}

fn heap_depth(nodes: usize, fan: usize) -> usize {
    // levels below a virtual root that sends to the first `fan` positions
    let (mut covered, mut level, mut depth) = (0usize, 1usize, 0usize);
    while covered < nodes {
        level = level.saturating_mul(fan);
        covered = covered.saturating_add(level);
        depth += 1;
    }
    depth
}

fn agg_node_depth(mut c: usize, fan: usize) -> usize {
    let mut d = 0;
    while c > 0 {
        c = (c - 1) / fan;
        d += 1;
    }
    d
}

impl SortPlan {
    pub fn record_width(&self) -> usize {
        self.item_width + 1
    }

    /// Communication rounds from the owners' first send to delivery on the
    /// placement machines.
    pub fn rounds(&self) -> usize {
        self.broadcast_depth + self.agg_depth + 2
    }

    pub fn machines(&self) -> usize {
        self.blocks + self.blocks * self.blocks + self.placement_machines()
    }

    pub fn placement_machines(&self) -> usize {
        self.items.div_ceil(self.per_placement)
    }

    /// Picks the broadcast fan that minimises rounds, then machines.
    pub fn new(
        items: usize,
        key_width: usize,
        item_width: usize,
        memory: usize,
        per_placement: Option<usize>,
    ) -> Result<Self, LocalFault> {
        let w = item_width + 1;
        if items == 0 || key_width == 0 || key_width > item_width {
            return Err(LocalFault::Capacity(format!(
                "sort needs items and a key inside the item (items {items}, key {key_width}, width {item_width})"
            )));
        }
        let per_placement = per_placement.unwrap_or(memory / (w + 1));
        if per_placement == 0 || per_placement * (w + 1) > memory {
            return Err(LocalFault::Capacity(format!(
                "{per_placement} placed records of {} words exceed memory {memory}",
                w + 1
            )));
        }
        let mut best: Option<SortPlan> = None;
        for fan in 2..=memory.max(2) {
            let room = (memory / (2 * fan)).saturating_sub(2);
            let block = (room / w).min(memory / (w + 1)).min(memory / 3).min(items);
            if block == 0 {
                break;
            }
            let blocks = items.div_ceil(block);
            let agg_fan = memory / block - 1;
            let plan = SortPlan {
                items,
                key_width,
                item_width,
                memory,
                fan,
                block,
                blocks,
                agg_fan,
                per_placement,
                broadcast_depth: heap_depth(2 * blocks - 1, fan),
                agg_depth: agg_node_depth(blocks - 1, agg_fan),
            };
            let better = match &best {
                None => true,
                Some(b) => (plan.rounds(), plan.machines()) < (b.rounds(), b.machines()),
            };
            if better {
                best = Some(plan);
            }
        }
        best.ok_or_else(|| {
            LocalFault::Capacity(format!("records of {w} words do not fit a sort block in memory {memory}"))
        })
    }
}

/// Produces the records a machine contributes to a sort.
pub type RecordSource<'a> = dyn Fn(usize, &Memory) -> Result<Vec<Word>, LocalFault> + 'a;

/// A placed sort: the plan plus its machine regions.
#[derive(Debug, Clone)]
pub struct SortStage {
    pub plan: SortPlan,
    pub owners: Region,
    pub grid: Region,
    pub placement: Region,
}

/// Orders records `[index, key..., rest...]` by key, then index.
pub fn compare_records(a: &[Word], b: &[Word], key_width: usize) -> Ordering {
    a[1..=key_width].cmp(&b[1..=key_width]).then(a[0].cmp(&b[0]))
}

impl SortStage {
    pub fn place(plan: SortPlan, layout: &mut Layout) -> Self {
        let owners = layout.alloc(plan.blocks);
        let grid = layout.alloc(plan.blocks * plan.blocks);
        let placement = layout.alloc(plan.placement_machines());
        Self { plan, owners, grid, placement }
    }

    pub fn rounds(&self) -> usize {
        self.plan.rounds()
    }

    /// Owner of the item with zero-based position `pos`.
    pub fn owner_of(&self, pos: usize) -> MachineId {
        self.owners.id(pos / self.plan.block)
    }

    /// Item positions held by owner block `a`.
    pub fn block_items(&self, a: usize) -> std::ops::Range<usize> {
        super::layout::block_span(a, self.plan.block, self.plan.items)
    }

    pub fn handles(&self, id: MachineId) -> bool {
        self.owners.contains(id) || self.grid.contains(id) || self.placement.contains(id)
    }

    fn grid_id(&self, row: usize, col: usize) -> MachineId {
        self.grid.id(row * self.plan.blocks + col)
    }

    /// Grid machine at position `pos` of block `a`'s broadcast heap.
    fn heap_node(&self, a: usize, pos: usize) -> MachineId {
        let b = self.plan.blocks;
        if pos < b {
            self.grid_id(a, pos)
        } else {
            let c = pos - b;
            let c = if c < a { c } else { c + 1 };
            self.grid_id(c, a)
        }
    }

    fn heap_children(&self, a: usize, pos: Option<usize>) -> Vec<MachineId> {
        let nodes = 2 * self.plan.blocks - 1;
        let first = pos.map_or(0, |p| self.plan.fan * (p + 1));
        (first..(first + self.plan.fan).min(nodes)).map(|p| self.heap_node(a, p)).collect()
    }

    /// Local step for stage round `k` (1-based). `make_records` turns an
    /// owner's memory at the first round into its block's flat records.
    pub fn step(
        &self,
        k: usize,
        id: MachineId,
        mem: &Memory,
        make_records: &RecordSource<'_>,
    ) -> Result<StepOutput, LocalFault> {
        let p = &self.plan;
        let w = p.record_width();
        let bcast = p.broadcast_depth;
        if let Some(a) = self.owners.index(id) {
            if k == 1 {
                let recs = make_records(a, mem)?;
                let expected = self.block_items(a).len() * w;
                if recs.len() != expected {
                    return Err(LocalFault::Malformed(format!(
                        "owner {a} built {} record words, expected {expected}",
                        recs.len()
                    )));
                }
                let mut payload = vec![a as Word];
                payload.extend_from_slice(&recs);
                let mut out = StepOutput::keep(recs);
                for dest in self.heap_children(a, None) {
                    out = out.send(dest, payload.clone());
                }
                return Ok(out);
            }
            if k < p.rounds() {
                return Ok(StepOutput::keep(mem.retained.clone()));
            }
            // placement
            let counts = mem.inbox.first().map(|m| m.words.as_slice()).unwrap_or(&[]);
            let recs: Vec<&[Word]> = records(&mem.retained, w)?.collect();
            if counts.len() != recs.len() {
                return Err(LocalFault::Malformed(format!("owner {a}: {} ranks for {} items", counts.len(), recs.len())));
            }
            let mut grouped: Vec<(MachineId, Vec<Word>)> = Vec::new();
            for (rec, &rank) in recs.iter().zip(counts) {
                let dest = self.placement.id(rank as usize / p.per_placement);
                match grouped.last_mut() {
                    Some((d, buf)) if *d == dest => {
                        buf.push(rank);
                        buf.extend_from_slice(rec);
                    }
                    _ => {
                        let mut buf = vec![rank];
                        buf.extend_from_slice(rec);
                        grouped.push((dest, buf));
                    }
                }
            }
            // ranks within a block are not monotone, so merge same destinations
            grouped.sort_by_key(|(d, _)| *d);
            let mut out = StepOutput::default();
            for (dest, buf) in grouped {
                match out.messages.last_mut() {
                    Some(m) if m.dest == dest => m.payload.extend(buf),
                    _ => out.messages.push(Outgoing::new(dest, buf)),
                }
            }
            return Ok(out);
        }
        if let Some(g) = self.grid.index(id) {
            let (row, col) = (g / p.blocks, g % p.blocks);
            if k <= bcast {
                let mut out = StepOutput::keep(mem.retained.clone());
                for msg in &mem.inbox {
                    let a = *msg.words.first().ok_or_else(|| LocalFault::Malformed("empty block".into()))? as usize;
                    let pos = if a == row {
                        col
                    } else {
                        let c = if row < a { row } else { row - 1 };
                        p.blocks + c
                    };
                    for dest in self.heap_children(a, Some(pos)) {
                        out = out.send(dest, msg.words.clone());
                    }
                    push_frame(&mut out.retain, &msg.words);
                }
                return Ok(out);
            }
            let j = k - bcast;
            let my_depth = agg_node_depth(col, p.agg_fan);
            let send_at = p.agg_depth - my_depth + 1;
            let mut counts: Vec<Word> = if j == 1 {
                let mut row_recs: Option<&[Word]> = None;
                let mut col_recs: Option<&[Word]> = None;
                // the deepest heap level is still in the inbox
                let held = frames(&mem.retained)?;
                for f in held.into_iter().chain(mem.inbox.iter().map(|m| m.words.as_slice())) {
                    let a = f[0] as usize;
                    if a == row {
                        row_recs = Some(&f[1..]);
                    }
                    if a == col {
                        col_recs = Some(&f[1..]);
                    }
                }
                let (rr, cr) = row_recs
                    .zip(col_recs)
                    .ok_or_else(|| LocalFault::Malformed(format!("grid ({row},{col}) is missing a block")))?;
                let cols: Vec<&[Word]> = records(cr, w)?.collect();
                records(rr, w)?
                    .map(|x| cols.iter().filter(|y| compare_records(y, x, p.key_width) == Ordering::Less).count() as Word)
                    .collect()
            } else {
                mem.retained.clone()
            };
            for msg in mem.inbox.iter().filter(|_| j > 1) {
                if msg.words.len() != counts.len() {
                    return Err(LocalFault::Malformed(format!("grid ({row},{col}): child count vector length")));
                }
                for (c, x) in counts.iter_mut().zip(&msg.words) {
                    *c += x;
                }
            }
            if j < send_at {
                return Ok(StepOutput::keep(counts));
            }
            let dest = if col == 0 { self.owners.id(row) } else { self.grid_id(row, (col - 1) / p.agg_fan) };
            return Ok(StepOutput::default().send(dest, counts));
        }
        Err(LocalFault::Malformed(format!("machine {id} is not part of the sort")))
    }

    /// Records delivered to a placement machine, in rank order, without the
    /// rank word.
    pub fn placed(&self, mem: &Memory) -> Result<Vec<Vec<Word>>, LocalFault> {
        let w = self.plan.record_width() + 1;
        let mut all: Vec<&[Word]> = Vec::new();
        for m in &mem.inbox {
            all.extend(records(&m.words, w)?);
        }
        all.sort_by_key(|r| r[0]);
        Ok(all.into_iter().map(|r| r[1..].to_vec()).collect())
    }

    /// Zero-based rank of the first record on placement machine `p`.
    pub fn first_rank(&self, p: usize) -> usize {
        p * self.plan.per_placement
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heap_depths() {
        assert_eq!(heap_depth(1, 2), 1);
        assert_eq!(heap_depth(2, 2), 1);
        assert_eq!(heap_depth(3, 2), 2);
        assert_eq!(heap_depth(6, 2), 2);
        assert_eq!(heap_depth(7, 2), 3);
        assert_eq!(agg_node_depth(0, 3), 0);
        assert_eq!(agg_node_depth(3, 3), 1);
        assert_eq!(agg_node_depth(4, 3), 2);
    }

    #[test]
    fn plan_respects_budgets() {
        for (n, s, w) in [(256, 128, 3), (1024, 256, 3), (64, 64, 5), (100, 40, 2)] {
            let p = SortPlan::new(n, 1, w, s, None).unwrap();
            let rw = p.record_width();
            assert!(2 * p.fan * (p.block * rw + 2) <= s, "{p:?}");
            assert!((p.agg_fan + 1) * p.block <= s);
            assert!(p.agg_fan >= 2);
            assert!(p.block * (rw + 1) <= s);
        }
    }

    #[test]
    fn oversized_record_is_capacity_error() {
        assert!(matches!(SortPlan::new(10, 1, 30, 32, None), Err(LocalFault::Capacity(_))));
    }

    #[test]
    fn stage_rounds_stay_constant() {
        for exp in 4..=16 {
            let n = 1usize << exp;
            for width in 1..=4 {
                let s = crate::mpc::default_memory(n * width);
                let plan = SortPlan::new(n, 1, width, s, None).unwrap();
                assert!(plan.rounds() <= SORT_STAGE_ROUNDS, "n={n} width={width}: {}", plan.rounds());
            }
        }
    }
}
