//! Dense brute-force retrieval oracle, written independently of the
//! library: full similarity matrix, plain loops, no shared helpers.

#![allow(dead_code)]

pub struct OracleHit {
    pub name: String,
    pub score: f64,
}

/// `keys[i]` belongs to `names[i]`; `queries` are the query rows.
pub fn retrieve(keys: &[Vec<f32>], names: &[String], queries: &[Vec<f32>], k: usize) -> Vec<OracleHit> {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let sim: Vec<Vec<f64>> = queries
        .iter()
        .map(|q| {
            keys.iter()
                .map(|kv| {
                    let d: f64 = q.iter().zip(kv).map(|(&a, &b)| a as f64 * b as f64).sum();
                    (d / (norm(q) * norm(kv))).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();

    // (score, entry, query) of each query's best key
    let mut best: Vec<(f64, usize, usize)> = Vec::new();
    for (j, row) in sim.iter().enumerate() {
        let mut arg = 0;
        for i in 1..row.len() {
            if row[i] > row[arg] {
                arg = i;
            }
        }
        best.push((row[arg], arg, j));
    }
    best.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut out: Vec<OracleHit> = Vec::new();
    for (score, i, _) in best {
        if out.len() == k {
            break;
        }
        if out.iter().all(|h| h.name != names[i]) {
            out.push(OracleHit {
                name: names[i].clone(),
                score,
            });
        }
    }
    out
}
