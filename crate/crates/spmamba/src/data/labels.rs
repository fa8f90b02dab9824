//! YOLO-style label files: one object per line, `class cx cy w h`, all
//! space-separated, box fields normalized to [0, 1] and written with six
//! decimal places.

use std::io::Write;

use crate::error::{Error, Result};

/// Slack for corner checks on parsed labels: six-decimal quantization can
/// nudge a corner past an exact bound by half an ulp of 1e-6.
const CORNER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Label {
    /// Corner coordinates (x1, y1, x2, y2), still normalized.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(Error::Data(format!(
                "label class {} out of range (num_classes {num_classes})",
                self.class_id
            )));
        }
        for v in [self.cx, self.cy, self.w, self.h] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Data(format!("label field {v} outside [0, 1]")));
            }
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Data("label box has non-positive size".into()));
        }
        let (x1, y1, x2, y2) = self.corners();
        if x1 < -CORNER_TOL || y1 < -CORNER_TOL || x2 > 1.0 + CORNER_TOL || y2 > 1.0 + CORNER_TOL {
            return Err(Error::Data(format!(
                "label box ({x1:.7}, {y1:.7}, {x2:.7}, {y2:.7}) leaves the image"
            )));
        }
        Ok(())
    }
}

pub fn write_labels<W: Write>(w: &mut W, labels: &[Label]) -> Result<()> {
    for l in labels {
        writeln!(
            w,
            "{} {:.6} {:.6} {:.6} {:.6}",
            l.class_id, l.cx, l.cy, l.w, l.h
        )?;
    }
    Ok(())
}

pub fn parse_labels(text: &str, file: &str, num_classes: usize) -> Result<Vec<Label>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                file: file.into(),
                line: line_no,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| Error::Parse {
            file: file.into(),
            line: line_no,
            msg: format!("bad class id {:?}", fields[0]),
        })?;
        let mut vals = [0.0f64; 4];
        for (slot, f) in vals.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| Error::Parse {
                file: file.into(),
                line: line_no,
                msg: format!("bad number {f:?}"),
            })?;
        }
        let label = Label { class_id, cx: vals[0], cy: vals[1], w: vals[2], h: vals[3] };
        label.validate(num_classes).map_err(|e| Error::Parse {
            file: file.into(),
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(label);
    }
    Ok(out)
}
