//! Normalized edit distance, table tree-edit similarity and the overall
//! score aggregate.

use std::collections::HashMap;

use crate::corpus::{DocKind, Document, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::otsl;

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(a, b) / max(|a|, |b|)`, and 0 when both are empty.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / m as f64
    }
}

/// An ordered labelled tree, nodes in preorder with the root at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    pub labels: Vec<u32>,
    pub children: Vec<Vec<usize>>,
}

const ROOT: u32 = 0;
const ROW: u32 = 1;
const CELL: u32 = 2;
const EMPTY_CELL: u32 = 3;
const CELL_BASE: u32 = 4;

impl Tree {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// root → rows → cells. With `content`, a filled cell is labelled by
    /// its token; otherwise every cell carries the same label.
    pub fn from_table(table: &otsl::Table, content: bool) -> Self {
        let mut t = Tree {
            labels: vec![ROOT],
            children: vec![Vec::new()],
        };
        for row in &table.rows {
            let r = t.push(0, ROW);
            for cell in row {
                let label = match (content, cell) {
                    (false, _) => CELL,
                    (true, None) => EMPTY_CELL,
                    (true, Some(tok)) => CELL_BASE + tok,
                };
                t.push(r, label);
            }
        }
        t
    }

    /// Appends a child of `parent`; returns its index.
    pub fn push(&mut self, parent: usize, label: u32) -> usize {
        let id = self.labels.len();
        self.labels.push(label);
        self.children.push(Vec::new());
        self.children[parent].push(id);
        id
    }

    /// Postorder labels and leftmost-leaf indices (both in postorder).
    fn postorder(&self) -> (Vec<u32>, Vec<usize>) {
        let mut labels = Vec::with_capacity(self.len());
        let mut leftmost = Vec::with_capacity(self.len());
        fn walk(t: &Tree, n: usize, labels: &mut Vec<u32>, leftmost: &mut Vec<usize>) -> usize {
            let mut first = None;
            for &c in &t.children[n] {
                let l = walk(t, c, labels, leftmost);
                first.get_or_insert(l);
            }
            let me = labels.len();
            labels.push(t.labels[n]);
            let l = first.unwrap_or(me);
            leftmost.push(l);
            l
        }
        if !self.is_empty() {
            walk(self, 0, &mut labels, &mut leftmost);
        }
        (labels, leftmost)
    }
}

/// Unit-cost ordered tree edit distance (Zhang–Shasha).
pub fn tree_edit_distance(a: &Tree, b: &Tree) -> usize {
    let (la, l1) = a.postorder();
    let (lb, l2) = b.postorder();
    let (n, m) = (la.len(), lb.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let keyroots = |l: &[usize]| -> Vec<usize> {
        let mut last: HashMap<usize, usize> = HashMap::new();
        for (i, &li) in l.iter().enumerate() {
            last.insert(li, i);
        }
        let mut k: Vec<usize> = last.into_values().collect();
        k.sort_unstable();
        k
    };
    let mut td = vec![vec![0usize; m]; n];
    let mut fd = vec![vec![0usize; m + 1]; n + 1];
    for &i in &keyroots(&l1) {
        for &j in &keyroots(&l2) {
            let (li, lj) = (l1[i], l2[j]);
            // fd[x][y]: forest l1[i]..x-1 against l2[j]..y-1, offsets by li/lj.
            let w = i - li + 2;
            let h = j - lj + 2;
            fd[0][0] = 0;
            for x in 1..w {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..h {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..w {
                for y in 1..h {
                    let (ni, nj) = (li + x - 1, lj + y - 1);
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if l1[ni] == li && l2[nj] == lj {
                        let rel = fd[x - 1][y - 1] + usize::from(la[ni] != lb[nj]);
                        fd[x][y] = del.min(ins).min(rel);
                        td[ni][nj] = fd[x][y];
                    } else {
                        let px = l1[ni] - li;
                        let py = l2[nj] - lj;
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[ni][nj]);
                    }
                }
            }
        }
    }
    td[n - 1][m - 1]
}

fn tree_similarity(a: &Tree, b: &Tree) -> f64 {
    let m = a.len().max(b.len());
    if m == 0 {
        1.0
    } else {
        1.0 - tree_edit_distance(a, b) as f64 / m as f64
    }
}

/// `(TEDS, TEDS-S)` in `[0, 1]`. A trailing EOS is accepted; an
/// unparseable prediction or ground truth scores `(0, 0)`.
pub fn teds_lite(pred: &[TokenId], gt: &[TokenId], vocab: &Vocabulary) -> (f64, f64) {
    let (Ok(p), Ok(g)) = (otsl::parse(pred, vocab), otsl::parse(gt, vocab)) else {
        return (0.0, 0.0);
    };
    (
        tree_similarity(&Tree::from_table(&p, true), &Tree::from_table(&g, true)),
        tree_similarity(&Tree::from_table(&p, false), &Tree::from_table(&g, false)),
    )
}

/// `((1 − text_edit)·100 + formula + table) / 3`.
pub fn overall_score(text_edit: f64, formula: f64, table: f64) -> f64 {
    ((1.0 - text_edit) * 100.0 + formula + table) / 3.0
}

/// Drops everything from the first EOS on.
pub fn strip_eos(tokens: &[TokenId], eos: TokenId) -> &[TokenId] {
    match tokens.iter().position(|&t| t == eos) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Pairwise similarity in `[0, 1]` used for consistency scoring: TEDS-lite
/// for tables, `1 − normalized edit distance` otherwise.
pub fn similarity(kind: DocKind, a: &[TokenId], b: &[TokenId], vocab: &Vocabulary) -> f64 {
    if strip_eos(a, vocab.eos) == strip_eos(b, vocab.eos) {
        return 1.0;
    }
    match kind {
        DocKind::Table => teds_lite(a, b, vocab).0,
        _ => 1.0 - normalized_edit_distance(strip_eos(a, vocab.eos), strip_eos(b, vocab.eos)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreReport {
    /// Mean normalized edit distance over text documents.
    pub text_edit: f64,
    /// `100 · (1 − edit)` averaged over formula documents.
    pub formula: f64,
    pub table_teds: f64,
    pub table_teds_s: f64,
    /// Mean of the per-kind scores present; equals [`overall_score`] when all
    /// three kinds are present.
    pub overall: f64,
    /// Mean token accuracy `1 − edit` over all documents.
    pub token_acc: f64,
    /// Fraction of documents reproduced exactly.
    pub seq_acc: f64,
    /// Text, table and formula document counts.
    pub counts: [usize; 3],
}

impl ScoreReport {
    pub fn csv_header() -> &'static str {
        "text_edit,formula,table_teds,table_teds_s,overall,token_acc,seq_acc,n_text,n_table,n_formula"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{},{},{}",
            self.text_edit,
            self.formula,
            self.table_teds,
            self.table_teds_s,
            self.overall,
            self.token_acc,
            self.seq_acc,
            self.counts[0],
            self.counts[1],
            self.counts[2]
        )
    }

    pub fn table(&self) -> String {
        format!(
            "kind     n      score\n\
             text     {:<6} edit {:.4}\n\
             table    {:<6} TEDS {:.2}  TEDS-S {:.2}\n\
             formula  {:<6} 100(1-edit) {:.2}\n\
             overall         {:.2}\n\
             token acc       {:.4}\n\
             exact match     {:.4}\n",
            self.counts[0],
            self.text_edit,
            self.counts[1],
            self.table_teds * 100.0,
            self.table_teds_s * 100.0,
            self.counts[2],
            self.formula,
            self.overall,
            self.token_acc,
            self.seq_acc
        )
    }
}

/// Scores predictions against ground truth. Missing predictions count as
/// worst case; a prediction for an unknown id is a data error. Table TEDS
/// values are reported in `[0, 1]` and enter the overall score as
/// percentages.
pub fn score_corpus(
    predictions: &[(u64, Vec<TokenId>)],
    ground_truth: &[Document],
    vocab: &Vocabulary,
) -> Result<ScoreReport> {
    let index: HashMap<u64, usize> = ground_truth.iter().enumerate().map(|(i, d)| (d.id, i)).collect();
    let mut pred: Vec<Option<&[TokenId]>> = vec![None; ground_truth.len()];
    for (id, toks) in predictions {
        let i = *index
            .get(id)
            .ok_or_else(|| Error::Data(format!("prediction for unknown document {id}")))?;
        pred[i] = Some(toks);
    }
    let mut r = ScoreReport::default();
    let (mut text_edit, mut formula, mut teds, mut teds_s) = (0.0, 0.0, 0.0, 0.0);
    let (mut tok, mut exact) = (0.0, 0usize);
    for (doc, p) in ground_truth.iter().zip(&pred) {
        let gt = strip_eos(&doc.tokens, vocab.eos);
        let edit = match p {
            Some(p) => normalized_edit_distance(strip_eos(p, vocab.eos), gt),
            None => 1.0,
        };
        tok += 1.0 - edit;
        exact += usize::from(p.is_some_and(|p| strip_eos(p, vocab.eos) == gt));
        match doc.kind {
            DocKind::Text => {
                r.counts[0] += 1;
                text_edit += edit;
            }
            DocKind::Table => {
                r.counts[1] += 1;
                if let Some(p) = p {
                    let (a, b) = teds_lite(p, &doc.tokens, vocab);
                    teds += a;
                    teds_s += b;
                }
            }
            DocKind::Formula => {
                r.counts[2] += 1;
                formula += 100.0 * (1.0 - edit);
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    r.text_edit = if r.counts[0] == 0 { 1.0 } else { mean(text_edit, r.counts[0]) };
    r.formula = mean(formula, r.counts[2]);
    r.table_teds = mean(teds, r.counts[1]);
    r.table_teds_s = mean(teds_s, r.counts[1]);
    let parts: Vec<f64> = [
        (r.counts[0], (1.0 - r.text_edit) * 100.0),
        (r.counts[2], r.formula),
        (r.counts[1], r.table_teds * 100.0),
    ]
    .into_iter()
    .filter(|(n, _)| *n > 0)
    .map(|(_, v)| v)
    .collect();
    r.overall = if parts.is_empty() { 0.0 } else { parts.iter().sum::<f64>() / parts.len() as f64 };
    let n = ground_truth.len();
    r.token_acc = mean(tok, n);
    r.seq_acc = mean(exact as f64, n);
    Ok(r)
}

pub mod oracle {
    //! Exhaustive search over edit mappings. Exponential; meant for
    //! certifying the dynamic program on trees of a dozen nodes.

    use super::Tree;

    struct Info {
        pre: Vec<usize>,
        post: Vec<usize>,
    }

    fn info(t: &Tree) -> Info {
        let mut pre = vec![0; t.len()];
        let mut post = vec![0; t.len()];
        let (mut a, mut b) = (0, 0);
        fn walk(t: &Tree, n: usize, pre: &mut [usize], post: &mut [usize], a: &mut usize, b: &mut usize) {
            pre[n] = *a;
            *a += 1;
            for &c in &t.children[n] {
                walk(t, c, pre, post, a, b);
            }
            post[n] = *b;
            *b += 1;
        }
        if !t.is_empty() {
            walk(t, 0, &mut pre, &mut post, &mut a, &mut b);
        }
        Info { pre, post }
    }

    // x is an ancestor of y iff it comes before in preorder and after in postorder.
    fn anc(i: &Info, x: usize, y: usize) -> bool {
        i.pre[x] < i.pre[y] && i.post[x] > i.post[y]
    }

    fn left(i: &Info, x: usize, y: usize) -> bool {
        i.pre[x] < i.pre[y] && i.post[x] < i.post[y]
    }

    /// Minimum over all valid mappings of relabels + deletions + insertions.
    pub fn brute_force_ted(a: &Tree, b: &Tree) -> usize {
        let (ia, ib) = (info(a), info(b));
        let mut used = vec![false; b.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut best = a.len() + b.len();
        #[allow(clippy::too_many_arguments)]
        fn go(
            x: usize,
            a: &Tree,
            b: &Tree,
            ia: &Info,
            ib: &Info,
            used: &mut [bool],
            pairs: &mut Vec<(usize, usize)>,
            relabels: usize,
            best: &mut usize,
        ) {
            let m = pairs.len();
            let cost = relabels + (a.len() - m) + (b.len() - m);
            if x == a.len() {
                *best = (*best).min(cost);
                return;
            }
            // Lower bound: the remaining nodes can at best all be matched freely.
            let rest = a.len() - x;
            let lb = relabels + (a.len() - m - rest.min(b.len() - m)) + (b.len() - m - rest.min(b.len() - m));
            if lb >= *best {
                return;
            }
            go(x + 1, a, b, ia, ib, used, pairs, relabels, best);
            for y in 0..b.len() {
                if used[y] {
                    continue;
                }
                let ok = pairs.iter().all(|&(p, q)| {
                    anc(ia, p, x) == anc(ib, q, y)
                        && anc(ia, x, p) == anc(ib, y, q)
                        && left(ia, p, x) == left(ib, q, y)
                        && left(ia, x, p) == left(ib, y, q)
                });
                if ok {
                    used[y] = true;
                    pairs.push((x, y));
                    let r = relabels + usize::from(a.labels[x] != b.labels[y]);
                    go(x + 1, a, b, ia, ib, used, pairs, r, best);
                    pairs.pop();
                    used[y] = false;
                }
            }
        }
        go(0, a, b, &ia, &ib, &mut used, &mut pairs, 0, &mut best);
        best
    }
}
