//! Landmark CSV: a header line, then `frame_index,role,x1,y1,…` rows with
//! six points in role order, or all 68 points (told apart by column count).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geomfeat::{select_landmarks, FramePersons, LandmarkSet, Point, SixPoints};

const SIX_COLUMNS: usize = 2 + 12;
const FULL_COLUMNS: usize = 2 + 2 * LandmarkSet::LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRow {
    pub frame: usize,
    pub victim: bool,
    pub points: SixPoints,
}

/// Per-frame annotations keyed by frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    pub frames: BTreeMap<usize, FramePersons>,
}

impl Annotations {
    pub fn frame(&self, index: usize) -> Option<&FramePersons> {
        self.frames.get(&index)
    }
}

pub fn parse_annotations(text: &str, origin: &Path) -> Result<Annotations> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut partial: BTreeMap<usize, [Option<SixPoints>; 2]> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != SIX_COLUMNS && cols.len() != FULL_COLUMNS {
            return Err(perr(
                lineno,
                format!("expected {SIX_COLUMNS} or {FULL_COLUMNS} columns, found {}", cols.len()),
            ));
        }
        let frame: usize = cols[0]
            .parse()
            .map_err(|_| perr(lineno, format!("bad frame index {:?}", cols[0])))?;
        let slot = match cols[1] {
            "victim" => 0,
            "stalker" => 1,
            other => return Err(perr(lineno, format!("role must be victim or stalker, found {other:?}"))),
        };
        let vals = cols[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| perr(lineno, format!("bad coordinate {c:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        let pts: Vec<Point> = vals.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        let six = if pts.len() == 6 {
            if pts.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
                return Err(perr(lineno, "non-finite coordinate".into()));
            }
            SixPoints(pts.try_into().unwrap())
        } else {
            select_landmarks(&LandmarkSet::new(pts).map_err(|e| perr(lineno, e.to_string()))?)
        };
        let entry = partial.entry(frame).or_default();
        if entry[slot].replace(six).is_some() {
            return Err(perr(lineno, format!("frame {frame} has two {} rows", cols[1])));
        }
    }
    let mut frames = BTreeMap::new();
    for (f, [v, s]) in partial {
        match (v, s) {
            (Some(victim), Some(stalker)) => {
                frames.insert(f, FramePersons { victim, stalker });
            }
            _ => {
                return Err(Error::Validation(format!(
                    "{}: frame {f} needs exactly one victim and one stalker row",
                    origin.display()
                )))
            }
        }
    }
    Ok(Annotations { frames })
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn format_annotations(ann: &Annotations) -> String {
    let mut out = String::from("frame_index,role");
    for k in 1..=6 {
        let _ = write!(out, ",x{k},y{k}");
    }
    out.push('\n');
    for (f, fp) in &ann.frames {
        for (role, pts) in [("victim", &fp.victim), ("stalker", &fp.stalker)] {
            let _ = write!(out, "{f},{role}");
            for v in pts.coords() {
                // `{:?}` prints the shortest string that parses back to the same f64.
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_annotations(path: &Path, ann: &Annotations) -> Result<()> {
    fs::write(path, format_annotations(ann)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn persons(seed: f64) -> FramePersons {
        FramePersons {
            victim: SixPoints(std::array::from_fn(|i| Point::new(seed + i as f64, 0.1 * seed))),
            stalker: SixPoints(std::array::from_fn(|i| Point::new(seed * 2.0, i as f64 / 3.0))),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut ann = Annotations::default();
        for f in 0..5 {
            ann.frames.insert(f, persons(f as f64 + 0.123456789));
        }
        let back = parse_annotations(&format_annotations(&ann), Path::new("a.csv")).unwrap();
        assert_eq!(back, ann);
    }

    #[test]
    fn full_rows_are_reduced_to_six_points() {
        let mut line68 = String::from("0,victim");
        for k in 1..=68 {
            line68.push_str(&format!(",{k},{k}"));
        }
        let six = "0,stalker,1,1,2,2,3,3,4,4,5,5,6,6";
        let text = format!("header\n{line68}\n{six}\n");
        let ann = parse_annotations(&text, Path::new("a.csv")).unwrap();
        assert_eq!(ann.frame(0).unwrap().victim.nose_tip(), Point::new(34.0, 34.0));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_annotations("h\n0,victim,1,2\n", Path::new("a.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_annotations("h\n0,ghost,1,1,2,2,3,3,4,4,5,5,6,6\n", Path::new("a.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_annotations("h\n0,victim,1,1,2,2,3,3,4,4,5,5,6,6\n", Path::new("a.csv")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
