//! Brute-force reference computations used to check the fast estimators.
//!
//! Nothing here is optimized; everything is a literal transcription of the
//! defining sum.

/// All `n`-subsets of `0..size`, in lexicographic order.
pub fn subsets(size: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fn rec(start: usize, size: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for j in start..size {
            if size - j < n - cur.len() {
                break;
            }
            cur.push(j);
            rec(j + 1, size, n, cur, out);
            cur.pop();
        }
    }
    rec(0, size, n, &mut cur, &mut out);
    out
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// `sum w y / sum w` written as two plain loops.
pub fn literal_hajek(weights: &[f64], outcomes: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..weights.len() {
        if outcomes[i] {
            num += weights[i];
        }
        den += weights[i];
    }
    num / den
}

/// Every equally likely sample of a design with its weights.
#[derive(Debug, Clone)]
pub struct Enumerated {
    pub samples: Vec<(Vec<usize>, Vec<f64>)>,
}

impl Enumerated {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Design expectation of `f(sample, weights)` as a plain average.
    pub fn expectation(&self, mut f: impl FnMut(&[usize], &[f64]) -> f64) -> f64 {
        let mut s = 0.0;
        for (idx, w) in &self.samples {
            s += f(idx, w);
        }
        s / self.samples.len() as f64
    }
}

/// Simple random sampling without replacement of `n` out of `size`.
pub fn enumerate_srs(size: usize, n: usize) -> Enumerated {
    let w = size as f64 / n as f64;
    Enumerated {
        samples: subsets(size, n)
            .into_iter()
            .map(|s| {
                let k = s.len();
                (s, vec![w; k])
            })
            .collect(),
    }
}

/// Two strata `0..size_a` and `size_a..size`, SRS of `n_a` and `n_b` inside
/// each; all combinations are equally likely.
pub fn enumerate_stratified(size: usize, size_a: usize, n_a: usize, n_b: usize) -> Enumerated {
    let size_b = size - size_a;
    let (wa, wb) = (size_a as f64 / n_a as f64, size_b as f64 / n_b as f64);
    let mut samples = Vec::new();
    for a in subsets(size_a, n_a) {
        for b in subsets(size_b, n_b) {
            let mut idx = a.clone();
            idx.extend(b.iter().map(|j| j + size_a));
            let mut w = vec![wa; a.len()];
            w.extend(vec![wb; b.len()]);
            samples.push((idx, w));
        }
    }
    Enumerated { samples }
}
