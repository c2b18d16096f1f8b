//! Lesion annotations: cube ground truth, CSV IO, and conversion from
//! single-slice 2D markings.
//!
//! A lesion is a centroid plus a diameter; the implied box is an
//! axis-aligned cube of edge `diameter_mm` centred on the centroid. All
//! coordinates are world millimetres in `(x, y, z)` order as written in the
//! CSV, while volume code indexes `(z, y, x)`; conversions happen at the
//! boundary.

use crate::error::{Error, Result};
use std::path::Path;

pub const ANNOTATION_HEADER: [&str; 7] = [
    "scan_id",
    "x_mm",
    "y_mm",
    "z_mm",
    "diameter_mm",
    "lesion_type",
    "key_slice_z",
];

/// A cube lesion box: centroid in mm plus edge length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxXyzd {
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    pub diameter_mm: f64,
}

impl BoxXyzd {
    pub fn new(x_mm: f64, y_mm: f64, z_mm: f64, diameter_mm: f64) -> Self {
        BoxXyzd {
            x_mm,
            y_mm,
            z_mm,
            diameter_mm,
        }
    }

    /// Centroid as `(z, y, x)` to match voxel index order.
    #[inline]
    pub fn center_zyx(&self) -> [f64; 3] {
        [self.z_mm, self.y_mm, self.x_mm]
    }
}

/// One annotated lesion on one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub scan_id: String,
    pub bbox: BoxXyzd,
    /// Free-form category label; empty means unspecified.
    pub lesion_type: String,
    /// Axial key slice of the original 2D marking, if any.
    pub key_slice_z: Option<f64>,
}

/// Read an annotation CSV; the header must match [`ANNOTATION_HEADER`].
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.into(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Malformed {
                path: path.into(),
                detail: e.to_string(),
            },
        })?;
    {
        let headers = rdr.headers().map_err(|e| Error::Malformed {
            path: path.into(),
            detail: format!("unreadable header: {e}"),
        })?;
        let got: Vec<&str> = headers.iter().collect();
        if got != ANNOTATION_HEADER {
            return Err(Error::Malformed {
                path: path.into(),
                detail: format!("unexpected header {got:?}, expected {ANNOTATION_HEADER:?}"),
            });
        }
    }
    let mut out = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let row = row_idx + 2;
        let rec = rec.map_err(|e| Error::CsvRow {
            path: path.into(),
            row,
            detail: e.to_string(),
        })?;
        if rec.len() != 7 {
            return Err(Error::CsvRow {
                path: path.into(),
                row,
                detail: format!("expected 7 fields, got {}", rec.len()),
            });
        }
        let num = |idx: usize, name: &str| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| Error::CsvRow {
                path: path.into(),
                row,
                detail: format!("field {name} is not a number: {raw:?}"),
            })
        };
        let scan_id = rec.get(0).unwrap_or("").trim().to_string();
        if scan_id.is_empty() {
            return Err(Error::CsvRow {
                path: path.into(),
                row,
                detail: "empty scan_id".into(),
            });
        }
        let bbox = BoxXyzd::new(
            num(1, "x_mm")?,
            num(2, "y_mm")?,
            num(3, "z_mm")?,
            num(4, "diameter_mm")?,
        );
        if !(bbox.diameter_mm > 0.0) {
            return Err(Error::CsvRow {
                path: path.into(),
                row,
                detail: format!("diameter_mm must be > 0, got {}", bbox.diameter_mm),
            });
        }
        let key_raw = rec.get(6).unwrap_or("").trim();
        let key_slice_z = if key_raw.is_empty() {
            None
        } else {
            Some(num(6, "key_slice_z")?)
        };
        out.push(Annotation {
            scan_id,
            bbox,
            lesion_type: rec.get(5).unwrap_or("").trim().to_string(),
            key_slice_z,
        });
    }
    Ok(out)
}

/// Write annotations with the canonical header.
pub fn write_annotations(path: impl AsRef<Path>, anns: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let fail = |e: csv::Error| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e.to_string()),
    };
    wtr.write_record(ANNOTATION_HEADER).map_err(fail)?;
    for a in anns {
        let key = a.key_slice_z.map(|z| format!("{z}")).unwrap_or_default();
        wtr.write_record([
            a.scan_id.as_str(),
            &format!("{}", a.bbox.x_mm),
            &format!("{}", a.bbox.y_mm),
            &format!("{}", a.bbox.z_mm),
            &format!("{}", a.bbox.diameter_mm),
            a.lesion_type.as_str(),
            &key,
        ])
        .map_err(fail)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Lift a single-slice 2D rectangle marking to a 3D cube.
///
/// The centroid sits on the key slice at the rectangle midpoint; the cube
/// edge is the mean of the two rectangle side lengths, which tolerates
/// elongated markings better than either extreme.
pub fn convert_2d_annotation(
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    key_slice_z_mm: f64,
) -> Result<BoxXyzd> {
    if !(x_max > x_min) || !(y_max > y_min) {
        return Err(Error::InvalidArgument(format!(
            "degenerate 2D box ({x_min}, {y_min}, {x_max}, {y_max})"
        )));
    }
    let d = ((x_max - x_min) + (y_max - y_min)) / 2.0;
    Ok(BoxXyzd::new(
        (x_min + x_max) / 2.0,
        (y_min + y_max) / 2.0,
        key_slice_z_mm,
        d,
    ))
}

/// Drop lesions with `diameter_mm >= max_diameter_mm`; used on training
/// targets only, evaluation always sees the full list.
pub fn filter_oversize(anns: &[Annotation], max_diameter_mm: f64) -> Vec<Annotation> {
    anns.iter()
        .filter(|a| a.bbox.diameter_mm < max_diameter_mm)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ann(id: &str, d: f64) -> Annotation {
        Annotation {
            scan_id: id.into(),
            bbox: BoxXyzd::new(10.0, 20.0, 30.0, d),
            lesion_type: "lung".into(),
            key_slice_z: Some(30.0),
        }
    }

    #[test]
    fn roundtrip_preserves_rows() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let anns = vec![ann("s1", 6.5), ann("s2", 12.0)];
        write_annotations(&p, &anns).unwrap();
        let back = read_annotations(&p).unwrap();
        assert_eq!(back, anns);
    }

    #[test]
    fn missing_key_slice_roundtrips_as_none() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut a = ann("s1", 6.5);
        a.key_slice_z = None;
        write_annotations(&p, std::slice::from_ref(&a)).unwrap();
        assert_eq!(read_annotations(&p).unwrap()[0].key_slice_z, None);
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "scan,x,y,z,d,t,k\ns1,1,2,3,4,lung,3\n").unwrap();
        match read_annotations(&p) {
            Err(Error::Malformed { detail, .. }) => assert!(detail.contains("header")),
            other => panic!("expected Malformed, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_names_row() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let head = ANNOTATION_HEADER.join(",");
        std::fs::write(&p, format!("{head}\ns1,1,2,3,4,lung,3\ns2,1,2,oops,4,lung,3\n")).unwrap();
        match read_annotations(&p) {
            Err(Error::CsvRow { row, detail, .. }) => {
                assert_eq!(row, 3);
                assert!(detail.contains("z_mm"));
            }
            other => panic!("expected CsvRow, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_diameter_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let head = ANNOTATION_HEADER.join(",");
        std::fs::write(&p, format!("{head}\ns1,1,2,3,0,lung,3\n")).unwrap();
        assert!(matches!(read_annotations(&p), Err(Error::CsvRow { .. })));
    }

    #[test]
    fn convert_2d_square_box() {
        let b = convert_2d_annotation(0.0, 0.0, 10.0, 10.0, 5.0).unwrap();
        assert_eq!(b, BoxXyzd::new(5.0, 5.0, 5.0, 10.0));
    }

    #[test]
    fn convert_2d_elongated_box_averages_sides() {
        let b = convert_2d_annotation(0.0, 0.0, 10.0, 20.0, 7.0).unwrap();
        assert_eq!(b, BoxXyzd::new(5.0, 10.0, 7.0, 15.0));
    }

    #[test]
    fn convert_2d_degenerate_rejected() {
        assert!(convert_2d_annotation(3.0, 3.0, 3.0, 3.0, 1.0).is_err());
    }

    #[test]
    fn oversize_filter_is_strict_at_threshold() {
        let anns = vec![ann("a", 47.9), ann("b", 48.0), ann("c", 48.1)];
        let kept = filter_oversize(&anns, 48.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].scan_id, "a");
    }
}
