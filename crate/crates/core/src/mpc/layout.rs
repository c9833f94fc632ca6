//! Machine-range bookkeeping shared by the protocols.

use std::collections::BTreeMap;
use std::ops::Range;

use super::sim::{LocalFault, MachineId, Memory, Outgoing, Word};

/// A contiguous range of machine ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Region {
    pub start: MachineId,
    pub len: usize,
}

impl Region {
    pub fn id(&self, i: usize) -> MachineId {
        debug_assert!(i < self.len);
        self.start + i
    }

    pub fn contains(&self, id: MachineId) -> bool {
        id >= self.start && id < self.start + self.len
    }

    pub fn index(&self, id: MachineId) -> Option<usize> {
        self.contains(id).then(|| id - self.start)
    }

    pub fn end(&self) -> MachineId {
        self.start + self.len
    }
}

/// Hands out consecutive regions.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    next: MachineId,
}

impl Layout {
    /// Regions start after the first `reserved` machines.
    pub fn after(reserved: usize) -> Self {
        Self { next: reserved }
    }

    pub fn alloc(&mut self, len: usize) -> Region {
        let r = Region { start: self.next, len };
        self.next += len;
        r
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// A fan-`f` tree over `leaves` with internal levels on their own machines.
/// Node `j` of level `t` has parent `j / f` on level `t + 1`; the top level
/// has a single node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelTree {
    pub fan: usize,
    /// Sizes of levels `0..=depth`, leaves first.
    pub sizes: Vec<usize>,
}

impl LevelTree {
    pub fn new(leaves: usize, fan: usize) -> Self {
        assert!(fan >= 2 && leaves >= 1);
        let mut sizes = vec![leaves];
        while *sizes.last().unwrap() > 1 {
            let n = sizes.last().unwrap().div_ceil(fan);
            sizes.push(n);
        }
        Self { fan, sizes }
    }

    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Child index range of node `j` on level `t >= 1`.
    pub fn children(&self, t: usize, j: usize) -> Range<usize> {
        let lo = j * self.fan;
        lo..(lo + self.fan).min(self.sizes[t - 1])
    }

    /// Leaves under node `j` of level `t`.
    pub fn leaf_span(&self, t: usize, j: usize) -> Range<usize> {
        let width = self.fan.pow(t as u32);
        (j * width).min(self.sizes[0])..((j + 1) * width).min(self.sizes[0])
    }
}

/// Regions for every level of a [`LevelTree`]; level 0 may be supplied.
#[derive(Debug, Clone)]
pub struct PlacedTree {
    pub shape: LevelTree,
    pub levels: Vec<Region>,
}

impl PlacedTree {
    pub fn new(shape: LevelTree, leaves: Region, layout: &mut Layout) -> Self {
        let mut levels = vec![leaves];
        for &n in &shape.sizes[1..] {
            levels.push(layout.alloc(n));
        }
        Self { shape, levels }
    }

    /// `(level, index)` of a machine in the tree.
    pub fn locate(&self, id: MachineId) -> Option<(usize, usize)> {
        self.levels.iter().enumerate().find_map(|(t, r)| r.index(id).map(|j| (t, j)))
    }

    pub fn root(&self) -> MachineId {
        self.levels.last().unwrap().start
    }

    pub fn parent(&self, t: usize, j: usize) -> MachineId {
        self.levels[t + 1].id(j / self.shape.fan)
    }
}

/// Splits the words of a sender covering global positions
/// `start..start + words.len()` among destinations chosen per position.
/// A position may go to several machines. Messages are ordered by first use.
pub fn scatter(start: usize, words: &[Word], mut route: impl FnMut(usize, &mut Vec<MachineId>)) -> Vec<Outgoing> {
    let mut order: Vec<MachineId> = Vec::new();
    let mut by_dest: BTreeMap<MachineId, Vec<Word>> = BTreeMap::new();
    let mut dests = Vec::new();
    for (off, &w) in words.iter().enumerate() {
        dests.clear();
        route(start + off, &mut dests);
        for &d in &dests {
            let buf = by_dest.entry(d).or_insert_with(|| {
                order.push(d);
                Vec::new()
            });
            buf.push(w);
        }
    }
    order.into_iter().map(|d| Outgoing::new(d, by_dest.remove(&d).unwrap())).collect()
}

/// Inverse of [`scatter`] on the receiving side: rebuilds `position -> word`
/// from every inbox message, given each sender's span and the same router.
pub fn gather(
    me: MachineId,
    mem: &Memory,
    mut span_of: impl FnMut(MachineId) -> Option<Range<usize>>,
    mut route: impl FnMut(usize, &mut Vec<MachineId>),
) -> Result<BTreeMap<usize, Word>, LocalFault> {
    let mut out = BTreeMap::new();
    let mut dests = Vec::new();
    for msg in &mem.inbox {
        let span = span_of(msg.src)
            .ok_or_else(|| LocalFault::Malformed(format!("unexpected sender {} at machine {me}", msg.src)))?;
        let mut words = msg.words.iter();
        for g in span {
            dests.clear();
            route(g, &mut dests);
            if dests.contains(&me) {
                let w = words
                    .next()
                    .ok_or_else(|| LocalFault::Malformed(format!("short message from {} at machine {me}", msg.src)))?;
                out.insert(g, *w);
            }
        }
        if words.next().is_some() {
            return Err(LocalFault::Malformed(format!("long message from {} at machine {me}", msg.src)));
        }
    }
    Ok(out)
}

/// `[len, words...]` framing for heterogeneous retained state.
pub fn push_frame(buf: &mut Vec<Word>, words: &[Word]) {
    buf.push(words.len() as Word);
    buf.extend_from_slice(words);
}

pub fn frames(words: &[Word]) -> Result<Vec<&[Word]>, LocalFault> {
    let mut out = Vec::new();
    let mut rest = words;
    while let Some((&len, tail)) = rest.split_first() {
        let len = len as usize;
        if len > tail.len() {
            return Err(LocalFault::Malformed(format!("frame of {len} words with {} left", tail.len())));
        }
        out.push(&tail[..len]);
        rest = &tail[len..];
    }
    Ok(out)
}

/// Fixed-width records; errors when the length is not a multiple.
pub fn records(words: &[Word], width: usize) -> Result<std::slice::ChunksExact<'_, Word>, LocalFault> {
    if width == 0 || !words.len().is_multiple_of(width) {
        return Err(LocalFault::Malformed(format!("{} words are not records of width {width}", words.len())));
    }
    Ok(words.chunks_exact(width))
}

/// Blocks of `per` positions: the span of block `b` clipped to `total`.
pub fn block_span(b: usize, per: usize, total: usize) -> Range<usize> {
    (b * per).min(total)..((b + 1) * per).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::sim::Received;

    #[test]
    fn level_tree_shape() {
        let t = LevelTree::new(100, 4);
        assert_eq!(t.sizes, vec![100, 25, 7, 2, 1]);
        assert_eq!(t.depth(), 4);
        assert_eq!(t.children(2, 6), 24..25);
        assert_eq!(t.leaf_span(2, 6), 96..100);
        assert_eq!(LevelTree::new(1, 3).depth(), 0);
    }

    #[test]
    fn scatter_gather_round_trip() {
        let route = |g: usize, d: &mut Vec<MachineId>| {
            d.push(10 + g / 3);
            if g.is_multiple_of(3) && g > 0 {
                d.push(10 + (g - 1) / 3);
            }
        };
        let words: Vec<Word> = (100..110).collect();
        let mut inbox = Vec::new();
        for (src, span) in [(0usize, 0..4usize), (1, 4..10)] {
            for m in scatter(span.start, &words[span.clone()], route) {
                if m.dest == 11 {
                    inbox.push(Received { src, words: m.payload });
                }
            }
        }
        let mem = Memory { retained: vec![], inbox };
        let got = gather(11, &mem, |src| Some(if src == 0 { 0..4 } else { 4..10 }), route).unwrap();
        assert_eq!(got.into_iter().collect::<Vec<_>>(), vec![(3, 103), (4, 104), (5, 105), (6, 106)]);
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        push_frame(&mut buf, &[1, 2]);
        push_frame(&mut buf, &[]);
        push_frame(&mut buf, &[9]);
        let f = frames(&buf).unwrap();
        assert_eq!(f, vec![&[1, 2][..], &[][..], &[9][..]]);
        assert!(frames(&[5, 1]).is_err());
    }
}
