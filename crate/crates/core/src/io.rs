//! CSV helpers shared by every exported table. Floats are written with 17
//! significant digits so that doubles round-trip exactly.

use ndarray::Array2;

use crate::error::{invalid, Result, RopeError};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> RopeError {
    RopeError::InvalidArgument(format!("csv: {e}"))
}

/// Renders a header plus records as CSV text.
pub fn csv_string<H, R, I>(header: H, rows: R) -> Result<String>
where
    H: IntoIterator,
    H::Item: AsRef<[u8]>,
    R: IntoIterator<Item = I>,
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| RopeError::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| RopeError::InvalidArgument(e.to_string()))
}

/// Square or rectangular matrix as CSV with a `c0..c{k}` header.
pub fn matrix_to_csv(m: &Array2<f64>) -> Result<String> {
    let header = (0..m.ncols()).map(|c| format!("c{c}"));
    let rows = m
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>());
    csv_string(header, rows)
}

/// Parses a numeric matrix. A first record that does not parse as numbers
/// is treated as a header.
pub fn matrix_from_csv(text: &str) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return invalid(format!("csv row {i}: {e}")),
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return invalid("csv rows have differing lengths");
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.concat())
        .map_err(|e| RopeError::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_skipped() {
        let m = matrix_from_csv("c0,c1\n1,2\n3,4.5\n").unwrap();
        assert_eq!(m, ndarray::array![[1.0, 2.0], [3.0, 4.5]]);
        let m = matrix_from_csv("1,2\n3,4\n").unwrap();
        assert_eq!(m.nrows(), 2);
        assert!(matrix_from_csv("1,2\n3\n").is_err());
    }

    proptest! {
        #[test]
        fn matrix_csv_round_trips_bit_exact(
            vals in proptest::collection::vec(-1e300f64..1e300, 12)
        ) {
            let m = Array2::from_shape_vec((3, 4), vals).unwrap();
            let back = matrix_from_csv(&matrix_to_csv(&m).unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
