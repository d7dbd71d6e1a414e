use std::io::Write;

use super::UserEmbedding;
use crate::error::Result;
use crate::tensor::Matrix;

/// Comma-separated values with 9 significant digits.
pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.8e}")).collect::<Vec<_>>().join(",")
}

/// `user_id<TAB>values`, the user's vectors concatenated in order.
pub fn write_user_embeddings<W: Write>(mut w: W, users: &[UserEmbedding]) -> Result<()> {
    for u in users {
        let flat: Vec<f64> = u.vectors.iter().flatten().copied().collect();
        writeln!(w, "{}\t{}", u.user_id, format_vector(&flat))?;
    }
    Ok(())
}

pub fn write_item_embeddings<W: Write>(mut w: W, ids: &[u64], items: &Matrix) -> Result<()> {
    for (i, id) in ids.iter().enumerate() {
        writeln!(w, "{id}\t{}", format_vector(items.row(i)))?;
    }
    Ok(())
}

pub const RESULTS_HEADER: &str = "protocol\tM\tC\tseed\tusers\tmean\tp25\tp50\tp75";

/// One evaluation outcome; `mean` is recall@M or accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub protocol: String,
    pub m: usize,
    pub c: usize,
    pub seed: u64,
    pub users: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

pub fn write_results<W: Write>(mut w: W, rows: &[ResultRow]) -> Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.protocol, r.m, r.c, r.seed, r.users, r.mean, r.p25, r.p50, r.p75
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_vector(&[1.0, -0.000123456789123, 12345.6789]), "1.00000000e0,-1.23456789e-4,1.23456789e4");
    }

    #[test]
    fn user_lines_concatenate_vectors() {
        let mut buf = Vec::new();
        let u = UserEmbedding {
            user_id: 7,
            vectors: vec![vec![1.0], vec![2.0]],
        };
        write_user_embeddings(&mut buf, &[u]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "7\t1.00000000e0,2.00000000e0\n");
    }
}
