//! Reference implementations written independently of the library.

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor. Exactly-zero gradients (an output
/// bias under a shift-invariant softmax loss) come back from central
/// differences with h = 1e-5 as roundoff of about 2e-10; the floor keeps that
/// noise well under the tolerance while any real gradient above 1e-5 is
/// judged purely relatively.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn gain(g: u8) -> f64 {
    f64::from((1u32 << g) - 1)
}

fn dcg(grades: &[u8], k: usize) -> f64 {
    let mut total = 0.0;
    for (rank, &g) in grades.iter().take(k).enumerate() {
        total += gain(g) / ((rank + 2) as f64).log2();
    }
    total
}

fn permutations(items: &[u8], out: &mut Vec<Vec<u8>>) {
    if items.len() <= 1 {
        out.push(items.to_vec());
        return;
    }
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        let mut tails = Vec::new();
        permutations(&rest, &mut tails);
        for mut t in tails {
            t.insert(0, head);
            out.push(t);
        }
    }
}

/// nDCG@k whose ideal DCG is the maximum over every ordering of the list.
pub fn brute_force_ndcg(grades: &[u8], k: usize) -> f64 {
    let mut perms = Vec::new();
    permutations(grades, &mut perms);
    let ideal = perms.iter().map(|p| dcg(p, k)).fold(0.0, f64::max);
    if ideal == 0.0 {
        0.0
    } else {
        dcg(grades, k) / ideal
    }
}

/// ERR@k as an expectation over the rank at which the user stops:
/// P(stop at r) computed by multiplying continuation probabilities directly.
pub fn brute_force_err(grades: &[u8], k: usize) -> f64 {
    let stop: Vec<f64> = grades.iter().map(|&g| gain(g) / 16.0).collect();
    let mut expected = 0.0;
    for r in 0..grades.len().min(k) {
        let mut p = stop[r];
        for s in &stop[..r] {
            p *= 1.0 - s;
        }
        expected += p / (r + 1) as f64;
    }
    expected
}
