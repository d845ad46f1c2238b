//! Fill-reducing orderings for symmetric sparsity patterns.

use crate::sparse::CsrMatrix;

/// Subsets at or below this size are not dissected further.
const LEAF: usize = 96;

struct Graph<'a> {
    a: &'a CsrMatrix,
    dense: Vec<bool>,
    tag: Vec<u32>,
    level: Vec<u32>,
    next_tag: u32,
}

impl Graph<'_> {
    fn neighbours(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.a.row(v).map(|(c, _)| c).filter(move |&c| c != v && !self.dense[c])
    }

    fn mark(&mut self, verts: &[usize]) -> u32 {
        self.next_tag += 1;
        for &v in verts {
            self.tag[v] = self.next_tag;
        }
        self.next_tag
    }

    /// Breadth-first level sets of the component of `start` within the vertices tagged `tag`.
    fn levels(&mut self, start: usize, tag: u32) -> Vec<Vec<usize>> {
        let stamp = tag.wrapping_mul(2).wrapping_add(1);
        let mut levels = vec![vec![start]];
        // `level` doubles as a visited stamp so that no clearing is needed.
        self.level[start] = stamp;
        loop {
            let mut next = Vec::new();
            for &v in levels.last().unwrap() {
                for w in self.a.row(v).map(|(c, _)| c) {
                    if w != v && !self.dense[w] && self.tag[w] == tag && self.level[w] != stamp {
                        self.level[w] = stamp;
                        next.push(w);
                    }
                }
            }
            if next.is_empty() {
                return levels;
            }
            levels.push(next);
        }
    }

    fn dissect(&mut self, verts: Vec<usize>, out: &mut Vec<usize>) {
        if verts.len() <= LEAF {
            out.extend(verts);
            return;
        }
        let tag = self.mark(&verts);
        let mut levels = self.levels(verts[0], tag);
        let reached: usize = levels.iter().map(Vec::len).sum();
        if reached < verts.len() {
            // Disconnected: split off this component and handle the rest separately.
            let comp: Vec<usize> = levels.concat();
            let stamp = tag.wrapping_mul(2).wrapping_add(1);
            let rest: Vec<usize> = verts.iter().copied().filter(|&v| self.level[v] != stamp).collect();
            self.dissect(comp, out);
            self.dissect(rest, out);
            return;
        }
        // Pseudo-peripheral start by repeated sweeps.
        for _ in 0..2 {
            let far = *levels.last().unwrap().iter().min().unwrap();
            let tag = self.mark(&verts);
            let cand = self.levels(far, tag);
            if cand.len() <= levels.len() {
                break;
            }
            levels = cand;
        }
        if levels.len() < 3 {
            out.extend(verts);
            return;
        }
        let half = verts.len() / 2;
        let mut acc = 0;
        let mut split = 1;
        for (l, set) in levels.iter().enumerate() {
            acc += set.len();
            if acc >= half {
                split = l.clamp(1, levels.len() - 2);
                break;
            }
        }
        // Only separator vertices touching the next level are needed.
        let tag = self.mark(&levels[split + 1]);
        let (mut sep, mut left) = (Vec::new(), levels[..split].concat());
        for &v in &levels[split] {
            if self.neighbours(v).any(|w| self.tag[w] == tag) {
                sep.push(v);
            } else {
                left.push(v);
            }
        }
        let right = levels[split + 1..].concat();
        self.dissect(left, out);
        self.dissect(right, out);
        out.extend(sep);
    }
}

/// Nested dissection ordering of the pattern of the symmetric matrix `a`.
/// Returns `order` with `order[new] = old`. Rows much denser than average
/// are placed last.
pub fn nested_dissection(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows;
    let avg = a.nnz() as f64 / n.max(1) as f64;
    let dense: Vec<bool> = (0..n)
        .map(|i| {
            let deg = (a.indptr[i + 1] - a.indptr[i]) as f64;
            deg > 16.0 * avg && deg > 64.0
        })
        .collect();
    let mut g = Graph { a, dense, tag: vec![0; n], level: vec![0; n], next_tag: 0 };
    let verts: Vec<usize> = (0..n).filter(|&i| !g.dense[i]).collect();
    let mut out = Vec::with_capacity(n);
    g.dissect(verts, &mut out);
    out.extend((0..n).filter(|&i| g.dense[i]));
    out
}
