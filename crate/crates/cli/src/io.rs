//! Artifact output: atomic file replacement and the pinned CSV dialect.
//!
//! Every artifact is written to a temporary file in the destination
//! directory and renamed over the target, so readers see either the old
//! file or the complete new one.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use dsd_core::Mat;

use crate::config::ExperimentConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Identity stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub config_sha256: String,
    pub seed: u64,
}

impl Stamp {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            config_sha256: cfg.sha256(),
            seed: cfg.seed,
        }
    }

    /// First line of every CSV artifact.
    pub fn csv_comment(&self) -> String {
        format!("# dsd {TOOL_VERSION} config_sha256={} seed={}", self.config_sha256, self.seed)
    }

    pub fn provenance(&self) -> dsd_core::checkpoint::Provenance {
        dsd_core::checkpoint::Provenance {
            tool_version: TOOL_VERSION.into(),
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
        }
    }
}

/// Moments in an atomic write where an interruption can be simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KillPoint {
    /// Temporary file created, nothing written yet.
    Created,
    /// Half of the payload written.
    PartWritten,
    /// Payload complete and flushed, not yet renamed.
    BeforeRename,
    /// Target replaced.
    AfterRename,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, bytes, &mut |_| Ok(()))
}

/// [`write_atomic`] with a hook that may abort at each [`KillPoint`].
pub fn write_atomic_with(
    path: &Path,
    bytes: &[u8],
    hook: &mut dyn FnMut(KillPoint) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut inner = || -> std::io::Result<()> {
        // Dropping the temp file on any early return removes it.
        let mut tmp = tempfile::Builder::new().prefix(".dsd-").tempfile_in(dir)?;
        hook(KillPoint::Created)?;
        let half = bytes.len() / 2;
        tmp.write_all(&bytes[..half])?;
        hook(KillPoint::PartWritten)?;
        tmp.write_all(&bytes[half..])?;
        tmp.as_file().sync_all()?;
        // Temporary files are created owner-only; artifacts are shared.
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
        }
        hook(KillPoint::BeforeRename)?;
        tmp.persist(path).map_err(|e| e.error)?;
        hook(KillPoint::AfterRename)
    };
    inner().with_context(|| format!("cannot write {}", path.display()))
}

/// A CSV document in the pinned dialect: stamp comment, mandatory header,
/// comma separators, `.` decimals, LF line endings.
#[derive(Clone, Debug)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new(stamp: &Stamp, header: &str) -> Self {
        let mut text = stamp.csv_comment();
        text.push('\n');
        text.push_str(header);
        text.push('\n');
        Self {
            text,
            columns: header.split(',').count(),
        }
    }

    pub fn row(&mut self, line: &str) {
        debug_assert_eq!(line.split(',').count(), self.columns, "row {line:?}");
        self.text.push_str(line);
        self.text.push('\n');
    }

    /// One row per matrix row, values in shortest round-trip form.
    pub fn matrix_rows(&mut self, m: &Mat) {
        for i in 0..m.rows() {
            let mut line = String::new();
            for (j, v) in m.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                write!(line, "{v}").expect("writing to a string");
            }
            self.row(&line);
        }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

/// A parsed CSV artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut comments = Vec::new();
        let mut header = None;
        let mut rows = Vec::new();
        for line in text.lines() {
            if header.is_none() && line.starts_with('#') {
                comments.push(line.to_string());
            } else if header.is_none() {
                header = Some(line.split(',').map(str::to_string).collect::<Vec<_>>());
            } else if !line.is_empty() {
                rows.push(line.split(',').map(str::to_string).collect::<Vec<_>>());
            }
        }
        let Some(header) = header else { bail!("CSV without a header row") };
        for (i, r) in rows.iter().enumerate() {
            if r.len() != header.len() {
                bail!("row {} has {} fields, header has {}", i + 1, r.len(), header.len());
            }
        }
        Ok(Self { comments, header, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("malformed CSV {}", path.display()))
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("missing column {name:?}"))
    }

    /// The first row whose `key` column equals `value`.
    pub fn find(&self, key: &str, value: &str) -> Result<&[String]> {
        let k = self.column(key)?;
        self.rows
            .iter()
            .find(|r| r[k] == value)
            .map(|r| r.as_slice())
            .with_context(|| format!("no row with {key} = {value:?}"))
    }

    pub fn f64_at(&self, row: &[String], name: &str) -> Result<f64> {
        let c = self.column(name)?;
        row[c].parse().with_context(|| format!("column {name:?} is not a number: {:?}", row[c]))
    }

    /// All rows as a numeric matrix.
    pub fn to_mat(&self) -> Result<Mat> {
        let mut data = Vec::with_capacity(self.rows.len() * self.header.len());
        for r in &self.rows {
            for v in r {
                data.push(v.parse::<f64>().with_context(|| format!("not a number: {v:?}"))?);
            }
        }
        Ok(Mat::from_vec(self.rows.len(), self.header.len(), data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Error, ErrorKind};

    const POINTS: [KillPoint; 4] = [
        KillPoint::Created,
        KillPoint::PartWritten,
        KillPoint::BeforeRename,
        KillPoint::AfterRename,
    ];

    fn leftovers(dir: &Path) -> Vec<String> {
        std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with(".dsd-"))
            .collect()
    }

    #[test]
    fn interrupted_writes_never_expose_partial_files() {
        let old = b"old contents\n".repeat(100);
        let new = b"brand new contents\n".repeat(300);
        for point in POINTS {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.csv");
            write_atomic(&path, &old).unwrap();
            let res = write_atomic_with(&path, &new, &mut |p| {
                if p == point {
                    Err(Error::new(ErrorKind::Interrupted, "killed"))
                } else {
                    Ok(())
                }
            });
            assert!(res.is_err());
            let seen = std::fs::read(&path).unwrap();
            if point == KillPoint::AfterRename {
                assert_eq!(seen, new);
            } else {
                assert_eq!(seen, old, "{point:?}");
            }
            assert!(leftovers(dir.path()).is_empty(), "{point:?}");
        }
    }

    #[cfg(unix)]
    #[test]
    fn artifacts_are_world_readable() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_atomic(&path, b"x\n").unwrap();
        let mode = std::fs::metadata(&path).unwrap().permissions().mode();
        assert_eq!(mode & 0o777, 0o644);
    }

    #[test]
    fn interrupted_first_write_leaves_no_target() {
        for point in &POINTS[..3] {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("b.csv");
            let res = write_atomic_with(&path, b"x,y\n", &mut |p| {
                if p == *point {
                    Err(Error::new(ErrorKind::Interrupted, "killed"))
                } else {
                    Ok(())
                }
            });
            assert!(res.is_err());
            assert!(!path.exists());
            assert!(leftovers(dir.path()).is_empty());
        }
    }

    #[test]
    fn csv_round_trips_through_the_table_reader() {
        let stamp = Stamp {
            config_sha256: "0f".repeat(32),
            seed: 42,
        };
        let mut csv = Csv::new(&stamp, "x,y");
        let m = Mat::from_vec(2, 2, vec![0.1 + 0.2, -1e-300, 5.0, f64::MIN_POSITIVE]);
        csv.matrix_rows(&m);
        let t = Table::parse(csv.as_str()).unwrap();
        assert_eq!(t.comments, vec![stamp.csv_comment()]);
        assert!(t.comments[0].starts_with("# dsd "));
        assert!(t.comments[0].ends_with("seed=42"));
        assert_eq!(t.header, vec!["x", "y"]);
        let back = t.to_mat().unwrap();
        let bits = |m: &Mat| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert!(!csv.as_str().contains('\r'));
    }

    #[test]
    fn header_only_csv_has_no_rows() {
        let stamp = Stamp {
            config_sha256: String::new(),
            seed: 0,
        };
        let mut csv = Csv::new(&stamp, "x,y");
        csv.matrix_rows(&Mat::zeros(0, 2));
        let t = Table::parse(csv.as_str()).unwrap();
        assert!(t.rows.is_empty());
        assert_eq!(t.to_mat().unwrap().rows(), 0);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(Table::parse("a,b\n1,2\n3\n").is_err());
        assert!(Table::parse("# only a comment\n").is_err());
    }
}
