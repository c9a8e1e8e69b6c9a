//! Rate-1/2 LDPC codes: progressive-edge-growth construction, systematic
//! encoding, and scaled min-sum decoding.
//!
//! Columns of `H` are permuted at construction so the first `k` positions of
//! every codeword carry the message, giving a generator `G = [I_k | P]`.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const MIN_SUM_SCALE: f64 = 0.75;
pub const DEFAULT_MAX_ITERS: usize = 50;

/// Dense GF(2) row packed into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn zeros(len: usize) -> Self {
        BitRow(vec![0; len.div_ceil(64)])
    }
    fn get(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }
    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
    fn xor_assign(&mut self, other: &BitRow) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a ^= b);
    }
}

/// Parity-check matrix (sparse) and derived systematic generator.
#[derive(Clone, Debug)]
pub struct LdpcCode {
    n: usize,
    m: usize,
    /// Variable indices of each check.
    checks: Vec<Vec<usize>>,
    /// Check indices of each variable.
    vars: Vec<Vec<usize>>,
    /// Parity part `P` of `G = [I_k | P]`, one `m`-bit row per message bit.
    parity: Vec<BitRow>,
}

/// Result of one decoding attempt.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutcome {
    /// The `k` message bits (hard decisions, even on failure).
    pub bits: Vec<u8>,
    pub codeword: Vec<u8>,
    /// Whether the syndrome reached zero within the iteration budget.
    pub success: bool,
    pub iterations: usize,
}

impl LdpcCode {
    /// Builds a code from explicit check rows. `H` must have full row rank and
    /// `n = 2m`; columns are reordered so the message occupies positions `0..k`.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        let m = checks.len();
        if n != 2 * m {
            return Err(Error::invalid(format!("rate-1/2 code needs n = 2m, got n={n}, m={m}")));
        }
        if checks.iter().flatten().any(|&v| v >= n) {
            return Err(Error::invalid("check references a variable outside 0..n"));
        }
        let mut dense: Vec<BitRow> = checks
            .iter()
            .map(|row| {
                let mut r = BitRow::zeros(n);
                row.iter().for_each(|&v| r.set(v));
                r
            })
            .collect();
        // Gauss-Jordan elimination to find pivot (parity) columns.
        let mut pivots = Vec::with_capacity(m);
        let mut rank = 0;
        for col in 0..n {
            if rank == m {
                break;
            }
            let Some(p) = (rank..m).find(|&r| dense[r].get(col)) else {
                continue;
            };
            dense.swap(rank, p);
            let pivot_row = dense[rank].clone();
            for (r, row) in dense.iter_mut().enumerate() {
                if r != rank && row.get(col) {
                    row.xor_assign(&pivot_row);
                }
            }
            pivots.push(col);
            rank += 1;
        }
        if rank != m {
            return Err(Error::invalid(format!("parity-check matrix has rank {rank} < {m}")));
        }
        let is_pivot = {
            let mut v = vec![false; n];
            pivots.iter().for_each(|&c| v[c] = true);
            v
        };
        // New column order: message (non-pivot) columns, then pivot columns in
        // pivot-row order so the reduced matrix reads [A | I].
        let order: Vec<usize> = (0..n)
            .filter(|&c| !is_pivot[c])
            .chain(pivots.iter().copied())
            .collect();
        let k = n - m;
        let mut parity = vec![BitRow::zeros(m); k];
        for (r, row) in dense.iter().enumerate() {
            for (j, &c) in order[..k].iter().enumerate() {
                if row.get(c) {
                    parity[j].set(r);
                }
            }
        }
        let mut new_pos = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_pos[old] = new;
        }
        let checks: Vec<Vec<usize>> = checks
            .iter()
            .map(|row| {
                let mut r: Vec<usize> = row.iter().map(|&v| new_pos[v]).collect();
                r.sort_unstable();
                r
            })
            .collect();
        let mut vars = vec![Vec::new(); n];
        for (c, row) in checks.iter().enumerate() {
            for &v in row {
                vars[v].push(c);
            }
        }
        Ok(LdpcCode {
            n,
            m,
            checks,
            vars,
            parity,
        })
    }

    /// Regular (3,6) code of length `n` by progressive edge growth.
    ///
    /// Seeds are tried in sequence from `seed` until `H` has full rank.
    pub fn peg_regular(n: usize, seed: u64) -> Result<Self> {
        if n < 12 || n % 2 != 0 {
            return Err(Error::invalid(format!("PEG (3,6) code needs even n >= 12, got {n}")));
        }
        for attempt in 0..32 {
            let Some(checks) = peg_checks(n, n / 2, 3, seed.wrapping_add(attempt)) else {
                continue;
            };
            if let Ok(code) = LdpcCode::from_checks(n, checks) {
                return Ok(code);
            }
        }
        Err(Error::invalid("PEG construction never produced a full-rank H"))
    }

    /// The [8,4,4] extended Hamming code with weight-4 checks, small enough for
    /// exhaustive oracles.
    pub fn toy() -> Self {
        let checks = vec![
            vec![0, 1, 2, 3],
            vec![4, 5, 6, 7],
            vec![1, 3, 5, 7],
            vec![2, 3, 6, 7],
        ];
        LdpcCode::from_checks(8, checks).expect("toy code has full rank")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.n - self.m
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn check_rows(&self) -> &[Vec<usize>] {
        &self.checks
    }

    /// Check indices attached to each variable node.
    pub fn variable_checks(&self) -> &[Vec<usize>] {
        &self.vars
    }

    /// Dense `H` as `m` rows of `n` bits.
    pub fn parity_check_matrix(&self) -> Vec<Vec<u8>> {
        self.checks
            .iter()
            .map(|row| {
                let mut r = vec![0u8; self.n];
                row.iter().for_each(|&v| r[v] = 1);
                r
            })
            .collect()
    }

    /// Dense systematic generator `[I_k | P]` as `k` rows of `n` bits.
    pub fn generator_matrix(&self) -> Vec<Vec<u8>> {
        let k = self.k();
        (0..k)
            .map(|i| {
                let mut r = vec![0u8; self.n];
                r[i] = 1;
                for j in 0..self.m {
                    r[k + j] = self.parity[i].get(j) as u8;
                }
                r
            })
            .collect()
    }

    pub fn syndrome_ok(&self, codeword: &[u8]) -> bool {
        self.checks
            .iter()
            .all(|row| row.iter().fold(0u8, |acc, &v| acc ^ codeword[v]) == 0)
    }

    pub fn encode(&self, bits: &[u8]) -> Result<Vec<u8>> {
        let k = self.k();
        if bits.len() != k {
            return Err(Error::invalid(format!("LDPC encode expects {k} bits, got {}", bits.len())));
        }
        let mut acc = BitRow::zeros(self.m);
        for (i, &b) in bits.iter().enumerate() {
            if b & 1 == 1 {
                acc.xor_assign(&self.parity[i]);
            }
        }
        let mut cw = Vec::with_capacity(self.n);
        cw.extend(bits.iter().map(|b| b & 1));
        cw.extend((0..self.m).map(|j| acc.get(j) as u8));
        Ok(cw)
    }

    /// Scaled min-sum decoding with a flooding schedule.
    pub fn decode(&self, llr: &[f64], max_iters: usize) -> Result<DecodeOutcome> {
        if llr.len() != self.n {
            return Err(Error::invalid(format!("LDPC decode expects {} LLRs, got {}", self.n, llr.len())));
        }
        let k = self.k();
        let hard = |v: &[f64]| -> Vec<u8> { v.iter().map(|&x| (x < 0.0) as u8).collect() };
        let cw = hard(llr);
        if self.syndrome_ok(&cw) {
            return Ok(DecodeOutcome {
                bits: cw[..k].to_vec(),
                codeword: cw,
                success: true,
                iterations: 0,
            });
        }
        // Edge messages stored per check row, parallel to `self.checks`.
        let mut c2v: Vec<Vec<f64>> = self.checks.iter().map(|r| vec![0.0; r.len()]).collect();
        let mut v2c: Vec<Vec<f64>> = c2v.clone();
        let mut total = llr.to_vec();
        let mut cw = cw;
        for iter in 1..=max_iters {
            for (c, row) in self.checks.iter().enumerate() {
                for (e, &v) in row.iter().enumerate() {
                    v2c[c][e] = total[v] - c2v[c][e];
                }
            }
            for (c, msgs) in v2c.iter().enumerate() {
                let (mut min1, mut min2, mut argmin) = (f64::INFINITY, f64::INFINITY, usize::MAX);
                let mut sign = 1.0;
                for (e, &q) in msgs.iter().enumerate() {
                    let a = q.abs();
                    if q < 0.0 {
                        sign = -sign;
                    }
                    if a < min1 {
                        min2 = min1;
                        min1 = a;
                        argmin = e;
                    } else if a < min2 {
                        min2 = a;
                    }
                }
                for (e, &q) in msgs.iter().enumerate() {
                    let mag = if e == argmin { min2 } else { min1 };
                    let s = if q < 0.0 { -sign } else { sign };
                    c2v[c][e] = MIN_SUM_SCALE * s * mag;
                }
            }
            total.copy_from_slice(llr);
            for (c, row) in self.checks.iter().enumerate() {
                for (e, &v) in row.iter().enumerate() {
                    total[v] += c2v[c][e];
                }
            }
            cw = hard(&total);
            if self.syndrome_ok(&cw) {
                return Ok(DecodeOutcome {
                    bits: cw[..k].to_vec(),
                    codeword: cw,
                    success: true,
                    iterations: iter,
                });
            }
        }
        Ok(DecodeOutcome {
            bits: cw[..k].to_vec(),
            codeword: cw,
            success: false,
            iterations: max_iters,
        })
    }
}

/// Check rows of a PEG graph with `m` checks, variable degree `dv` and check
/// degree capped at `n dv / m`; `None` when the cap leaves no legal edge.
fn peg_checks(n: usize, m: usize, dv: usize, seed: u64) -> Option<Vec<Vec<usize>>> {
    let dc = n * dv / m;
    let mut rng = seeded(seed);
    let mut checks: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut vars: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut reached = vec![usize::MAX; m];
    let mut var_seen = vec![usize::MAX; n];
    let mut stamp = 0usize;
    for j in 0..n {
        for edge in 0..dv {
            let candidates: Vec<usize> = if edge == 0 {
                (0..m).collect()
            } else {
                stamp += 1;
                bfs_far_checks(j, &checks, &vars, &mut reached, &mut var_seen, stamp)
            };
            let open = |c: &usize| checks[*c].len() < dc && !vars[j].contains(c);
            let mut pool: Vec<usize> = candidates.into_iter().filter(open).collect();
            if pool.is_empty() {
                pool = (0..m).filter(open).collect();
            }
            let min_deg = pool.iter().map(|&c| checks[c].len()).min()?;
            let best: Vec<usize> = pool.into_iter().filter(|&c| checks[c].len() == min_deg).collect();
            let c = best[rng.gen_range(0..best.len())];
            checks[c].push(j);
            vars[j].push(c);
        }
    }
    Some(checks)
}

/// Candidate checks for a new edge of variable `root`: those unreachable from
/// it, or, when the BFS tree would cover every check at the next depth, the
/// checks first reached at that depth (the farthest ones).
fn bfs_far_checks(
    root: usize,
    checks: &[Vec<usize>],
    vars: &[Vec<usize>],
    reached: &mut [usize],
    var_seen: &mut [usize],
    stamp: usize,
) -> Vec<usize> {
    let m = checks.len();
    let mut count = 0;
    let mut frontier: VecDeque<usize> = VecDeque::new();
    var_seen[root] = stamp;
    for &c in &vars[root] {
        if reached[c] != stamp {
            reached[c] = stamp;
            count += 1;
            frontier.push_back(c);
        }
    }
    loop {
        let mut next = Vec::new();
        while let Some(c) = frontier.pop_front() {
            for &v in &checks[c] {
                if var_seen[v] == stamp {
                    continue;
                }
                var_seen[v] = stamp;
                for &c2 in &vars[v] {
                    if reached[c2] != stamp {
                        reached[c2] = stamp;
                        next.push(c2);
                    }
                }
            }
        }
        if next.is_empty() {
            return (0..m).filter(|&c| reached[c] != stamp).collect();
        }
        if count + next.len() == m {
            return next;
        }
        count += next.len();
        frontier.extend(next);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gf2_mul_ht(g: &[Vec<u8>], h: &[Vec<u8>]) -> bool {
        g.iter().all(|gr| {
            h.iter()
                .all(|hr| gr.iter().zip(hr).fold(0u8, |a, (x, y)| a ^ (x & y)) == 0)
        })
    }

    #[test]
    fn toy_generator_is_orthogonal() {
        let code = LdpcCode::toy();
        assert_eq!((code.n(), code.k()), (8, 4));
        assert!(gf2_mul_ht(&code.generator_matrix(), &code.parity_check_matrix()));
    }

    #[test]
    fn peg_code_is_regular_and_orthogonal() {
        let code = LdpcCode::peg_regular(96, 1).unwrap();
        for v in 0..code.n() {
            assert_eq!(code.vars[v].len(), 3);
        }
        let degs: Vec<usize> = code.checks.iter().map(Vec::len).collect();
        assert!(degs.iter().all(|&d| d == 6), "{degs:?}");
        assert!(gf2_mul_ht(&code.generator_matrix(), &code.parity_check_matrix()));
    }

    #[test]
    fn zero_message_zero_codeword() {
        let code = LdpcCode::peg_regular(64, 3).unwrap();
        let cw = code.encode(&vec![0; code.k()]).unwrap();
        assert!(cw.iter().all(|&b| b == 0));
        assert!(code.encode(&[0; 3]).is_err());
    }

    #[test]
    fn noiseless_llrs_decode_immediately() {
        let code = LdpcCode::peg_regular(64, 3).unwrap();
        let msg: Vec<u8> = (0..code.k()).map(|i| (i % 3 == 0) as u8).collect();
        let cw = code.encode(&msg).unwrap();
        let llr: Vec<f64> = cw.iter().map(|&b| if b == 0 { 5.0 } else { -5.0 }).collect();
        let out = code.decode(&llr, 50).unwrap();
        assert!(out.success);
        assert!(out.iterations <= 1);
        assert_eq!(out.bits, msg);
    }
}
