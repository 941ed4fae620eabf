//! Point cloud loading and saving: whitespace-separated XYZ text and ASCII
//! PLY, plus the per-point anomaly label files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::IngestError;

/// A point cloud in millimeters, with optional per-point binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudData {
    /// Flat `[x0, y0, z0, x1, y1, z1, ...]` coordinates.
    pub points: Vec<[f64; 3]>,
    /// Per-point anomaly label (0/1), same length as `points` when present.
    pub labels: Option<Vec<u8>>,
}

impl PointCloudData {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, IngestError> {
        if points.is_empty() {
            return Err(IngestError::Cloud("point cloud has zero points".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(IngestError::Cloud(format!("non-finite coordinate at point {i}")));
            }
        }
        Ok(Self { points, labels: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Axis-aligned bounding box diagonal, used as the cloud "diameter".
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }
}

/// Load a point cloud from XYZ text or ASCII PLY. The format is detected
/// from the content: files whose first line is `ply` are parsed as PLY,
/// everything else as whitespace-separated `x y z` lines with `#` comments.
/// Point order is preserved.
pub fn load_point_cloud(path: &Path) -> Result<PointCloudData, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let is_ply = text.lines().next().map(|l| l.trim() == "ply").unwrap_or(false);
    let points = if is_ply { parse_ply(&text) } else { parse_xyz(&text) }
        .map_err(|msg| IngestError::Cloud(format!("{}: {msg}", path.display())))?;
    PointCloudData::new(points)
}

fn parse_xyz(text: &str) -> Result<Vec<[f64; 3]>, String> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coords = [0.0f64; 3];
        for (k, slot) in coords.iter_mut().enumerate() {
            let tok = it
                .next()
                .ok_or_else(|| format!("line {}: expected 3 coordinates, got {k}", lineno + 1))?;
            *slot = tok
                .parse::<f64>()
                .map_err(|_| format!("line {}: invalid number {tok:?}", lineno + 1))?;
        }
        if it.next().is_some() {
            return Err(format!("line {}: more than 3 fields", lineno + 1));
        }
        if !coords.iter().all(|c| c.is_finite()) {
            return Err(format!("line {}: non-finite coordinate", lineno + 1));
        }
        points.push(coords);
    }
    Ok(points)
}

fn parse_ply(text: &str) -> Result<Vec<[f64; 3]>, String> {
    let mut lines = text.lines();
    lines.next(); // "ply"
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    let mut columns: Vec<String> = Vec::new();
    let mut saw_format = false;
    for line in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("comment") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("format ") {
            if !rest.starts_with("ascii") {
                return Err("only ASCII PLY is supported".into());
            }
            saw_format = true;
        } else if let Some(rest) = line.strip_prefix("element ") {
            let mut it = rest.split_whitespace();
            let name = it.next().unwrap_or("");
            in_vertex_element = name == "vertex";
            if in_vertex_element {
                let count = it.next().ok_or("element vertex missing count")?;
                vertex_count = Some(count.parse().map_err(|_| "invalid vertex count")?);
            }
        } else if let Some(rest) = line.strip_prefix("property ") {
            if in_vertex_element {
                let mut it = rest.split_whitespace();
                let _ty = it.next().ok_or("property missing type")?;
                if _ty == "list" {
                    return Err("list property on vertex element is unsupported".into());
                }
                let name = it.next().ok_or("property missing name")?;
                columns.push(name.to_string());
            }
        } else if line == "end_header" {
            break;
        }
    }
    if !saw_format {
        return Err("missing format line".into());
    }
    let n = vertex_count.ok_or("missing element vertex")?;
    let find_col = |name: &str| {
        columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| format!("missing vertex property {name}"))
    };
    let (xc, yc, zc) = (find_col("x")?, find_col("y")?, find_col("z")?);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let line = lines.next().ok_or("truncated vertex data")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < columns.len() {
            return Err(format!("vertex row has {} fields, expected {}", fields.len(), columns.len()));
        }
        let parse = |idx: usize| -> Result<f64, String> {
            fields[idx]
                .parse::<f64>()
                .map_err(|_| format!("invalid number {:?}", fields[idx]))
        };
        let p = [parse(xc)?, parse(yc)?, parse(zc)?];
        if !p.iter().all(|c| c.is_finite()) {
            return Err("non-finite coordinate".into());
        }
        points.push(p);
    }
    Ok(points)
}

/// Write a cloud as XYZ text. Coordinates are printed with Rust's shortest
/// round-trip float formatting, so `load_point_cloud` recovers them exactly.
pub fn save_xyz(cloud: &PointCloudData, path: &Path) -> Result<(), IngestError> {
    let mut out = String::with_capacity(cloud.len() * 24);
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| IngestError::io(path, e))
}

/// Load a per-point label file: one 0-based point index per line, `#`
/// comments allowed. Returns a dense 0/1 vector of length `n_points`.
/// Duplicate indices are tolerated (idempotent) with a warning.
pub fn load_point_labels(path: &Path, n_points: usize) -> Result<Vec<u8>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let mut labels = vec![0u8; n_points];
    let mut duplicates = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(pos) => &line[..pos],
            None => line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let idx: i64 = line
            .parse()
            .map_err(|_| IngestError::Cloud(format!("{}: line {}: invalid index {line:?}", path.display(), lineno + 1)))?;
        if idx < 0 {
            return Err(IngestError::Cloud(format!(
                "{}: line {}: negative point index {idx}",
                path.display(),
                lineno + 1
            )));
        }
        let idx = idx as usize;
        if idx >= n_points {
            return Err(IngestError::Cloud(format!(
                "{}: line {}: point index {idx} out of range for {n_points} points",
                path.display(),
                lineno + 1
            )));
        }
        if labels[idx] == 1 {
            duplicates += 1;
        }
        labels[idx] = 1;
    }
    if duplicates > 0 {
        log::warn!("{}: {duplicates} duplicate point indices", path.display());
    }
    Ok(labels)
}

/// Write labeled point indices, one per line, ascending.
pub fn save_point_labels(labels: &[u8], path: &Path) -> Result<(), IngestError> {
    let mut out = String::new();
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            out.push_str(&format!("{i}\n"));
        }
    }
    let mut file = fs::File::create(path).map_err(|e| IngestError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| IngestError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        fs::write(&path, content).unwrap();
        path
    }

    #[test]
    fn xyz_two_points() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "a.xyz", "0 0 0\n1 0 0\n");
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.points, vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn xyz_comments_and_blanks_skipped() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "a.xyz", "# header\n\n1 2 3 # trailing\n");
        let cloud = load_point_cloud(&path).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn short_line_reports_line_number() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "a.xyz", "0 0 0\n1 2\n");
        let err = load_point_cloud(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn zero_points_is_error() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "a.xyz", "# nothing\n");
        assert!(load_point_cloud(&path).is_err());
    }

    #[test]
    fn ply_matches_xyz() {
        let dir = tempdir().unwrap();
        let xyz = write_file(&dir, "a.xyz", "0 0 0\n1 0 0\n");
        let ply = write_file(
            &dir,
            "a.ply",
            "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n",
        );
        assert_eq!(load_point_cloud(&ply).unwrap(), load_point_cloud(&xyz).unwrap());
    }

    #[test]
    fn ply_extra_properties_ignored() {
        let dir = tempdir().unwrap();
        let ply = write_file(
            &dir,
            "b.ply",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nend_header\n9 1 2 3\n",
        );
        let cloud = load_point_cloud(&ply).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn binary_ply_rejected() {
        let dir = tempdir().unwrap();
        let ply = write_file(
            &dir,
            "c.ply",
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        );
        assert!(load_point_cloud(&ply).is_err());
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let cloud = PointCloudData::new(vec![
            [0.1, -2.75, 3.333333333333333],
            [1e-9, 123456.789, -0.0625],
        ])
        .unwrap();
        let path = dir.path().join("rt.xyz");
        save_xyz(&cloud, &path).unwrap();
        assert_eq!(load_point_cloud(&path).unwrap().points, cloud.points);
    }

    #[test]
    fn point_labels_basic() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "l.txt", "3\n17\n");
        let labels = load_point_labels(&path, 20).unwrap();
        let ones: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![3, 17]);
    }

    #[test]
    fn point_labels_empty_file_all_zero() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "l.txt", "");
        assert_eq!(load_point_labels(&path, 5).unwrap(), vec![0; 5]);
    }

    #[test]
    fn point_labels_out_of_range() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "l.txt", "25\n");
        assert!(load_point_labels(&path, 20).is_err());
    }

    #[test]
    fn point_labels_negative() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "l.txt", "-1\n");
        assert!(load_point_labels(&path, 20).is_err());
    }

    #[test]
    fn point_labels_duplicates_idempotent() {
        let dir = tempdir().unwrap();
        let path = write_file(&dir, "l.txt", "3\n3\n3\n");
        let labels = load_point_labels(&path, 5).unwrap();
        assert_eq!(labels, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn point_labels_round_trip() {
        let dir = tempdir().unwrap();
        let labels = vec![0u8, 1, 0, 1, 1, 0];
        let path = dir.path().join("rt.txt");
        save_point_labels(&labels, &path).unwrap();
        assert_eq!(load_point_labels(&path, labels.len()).unwrap(), labels);
    }
}
