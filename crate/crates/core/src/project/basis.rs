use serde::{Deserialize, Serialize};

/// Standardization and exponent cap for one conditioning variable.
///
/// A variable with `k` distinct values on the fitting sample never enters
/// with an exponent above `k - 1`; higher powers are collinear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarInfo {
    pub center: f64,
    pub scale: f64,
    pub max_exp: u32,
}

impl VarInfo {
    pub fn from_column(values: &[f64], degree: u32) -> Self {
        let n = values.len() as f64;
        let center = values.iter().sum::<f64>() / n;
        let var = values
            .iter()
            .map(|v| (v - center) * (v - center))
            .sum::<f64>()
            / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let mut distinct: Vec<f64> = Vec::new();
        for &v in values {
            if !distinct.contains(&v) {
                distinct.push(v);
                if distinct.len() > degree as usize {
                    break;
                }
            }
        }
        Self {
            center,
            scale,
            max_exp: (distinct.len() as u32).saturating_sub(1).min(degree),
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }
}

/// Exponent vectors with `e[k] <= caps[k]` and total degree `<= degree`,
/// ordered by total degree, then lexicographically. The first is the
/// constant.
pub fn monomials(caps: &[u32], degree: u32) -> Vec<Vec<u32>> {
    fn rec(caps: &[u32], left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == caps.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=caps[cur.len()].min(left) {
            cur.push(e);
            rec(caps, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(caps, degree, &mut Vec::with_capacity(caps.len()), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), e.clone()));
    out
}

pub fn eval_monomial(exps: &[u32], x: &[f64]) -> f64 {
    exps.iter()
        .zip(x)
        .map(|(&e, &v)| if e == 0 { 1.0 } else { v.powi(e as i32) })
        .product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count_and_order() {
        let m = monomials(&[3, 3, 3], 3);
        assert_eq!(m.len(), 20);
        assert_eq!(m[0], vec![0, 0, 0]);
        assert!(m
            .windows(2)
            .all(|w| w[0].iter().sum::<u32>() <= w[1].iter().sum::<u32>()));
        // binary first variable
        let m = monomials(&[1, 2], 2);
        assert_eq!(
            m,
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![0, 2], vec![1, 1]]
        );
        assert_eq!(monomials(&[], 3), vec![Vec::<u32>::new()]);
    }

    #[test]
    fn caps_follow_distinct_values() {
        assert_eq!(VarInfo::from_column(&[0.0, 1.0, 1.0, 0.0], 3).max_exp, 1);
        assert_eq!(VarInfo::from_column(&[2.0; 5], 3).max_exp, 0);
        assert_eq!(
            VarInfo::from_column(&[0.1, 0.2, 0.3, 0.4, 0.5], 3).max_exp,
            3
        );
    }
}
