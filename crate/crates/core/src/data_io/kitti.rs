//! KITTI object label lines.
//!
//! Camera coordinates (x right, y down, z forward, location at the box
//! bottom) are mapped to the internal frame at parse time:
//! `(x, y, z) = (z_cam, -x_cam, -y_cam + h/2)` and
//! `theta = -rotation_y - pi/2`, wrapped into `(-pi, pi]`.

use std::f64::consts::FRAC_PI_2;

use thiserror::Error;

use super::{LabeledBox, ObjectClass};
use crate::geometry::{normalize_angle, Box3D, GeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KittiParseError {
    #[error("line {line}: expected 15 or 16 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field `{field}` is not a number: `{value}`")]
    NotNumeric {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: unknown object class `{class}`")]
    UnknownClass { line: usize, class: String },
    #[error("line {line}: {message}")]
    OutOfRange { line: usize, message: String },
    #[error("line {line}: {source}")]
    Geometry {
        line: usize,
        source: GeometryError,
    },
}

const FIELD_NAMES: [&str; 16] = [
    "type",
    "truncated",
    "occluded",
    "alpha",
    "bbox_left",
    "bbox_top",
    "bbox_right",
    "bbox_bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

/// Camera-frame location (box bottom center), `(h, w, l)` and `rotation_y`
/// to an internal box.
pub fn kitti_camera_to_box(
    location: [f64; 3],
    hwl: [f64; 3],
    rotation_y: f64,
) -> Result<Box3D, GeometryError> {
    let [xc, yc, zc] = location;
    let h = hwl[0];
    Box3D::new([zc, -xc, -yc + 0.5 * h], hwl, -rotation_y - FRAC_PI_2)
}

/// Inverse of [`kitti_camera_to_box`]: `(location, rotation_y)`.
pub fn box_to_kitti_camera(b: &Box3D) -> ([f64; 3], f64) {
    (
        [-b.y, 0.5 * b.h - b.z, b.x],
        normalize_angle(-b.theta - FRAC_PI_2),
    )
}

/// Parses one label line. `line_no` is 1-based and only used in errors.
pub fn parse_kitti_label_line(line: &str, line_no: usize) -> Result<LabeledBox, KittiParseError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(KittiParseError::FieldCount {
            line: line_no,
            found: fields.len(),
        });
    }
    let class: ObjectClass = fields[0]
        .parse()
        .map_err(|_| KittiParseError::UnknownClass {
            line: line_no,
            class: fields[0].to_string(),
        })?;
    let mut nums = [0.0f64; 16];
    for (k, raw) in fields.iter().enumerate().skip(1) {
        // f64::from_str is locale independent and only accepts '.' decimals.
        nums[k] = raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| KittiParseError::NotNumeric {
                line: line_no,
                field: FIELD_NAMES[k],
                value: raw.to_string(),
            })?;
    }
    let bbox2d = [nums[4], nums[5], nums[6], nums[7]];
    let score = (fields.len() == 16).then_some(nums[15]);

    if class == ObjectClass::DontCare {
        // Placeholder 3D fields (-1 / -1000 / -10) are dropped.
        return Ok(LabeledBox {
            class,
            truncation: nums[1].clamp(0.0, 1.0),
            occlusion: 3,
            alpha: nums[3],
            bbox2d,
            box3d: None,
            score,
        });
    }

    let truncation = nums[1];
    if !(0.0..=1.0).contains(&truncation) {
        return Err(KittiParseError::OutOfRange {
            line: line_no,
            message: format!("truncation {truncation} outside [0, 1]"),
        });
    }
    let occ = nums[2];
    if occ.fract() != 0.0 || !(0.0..=3.0).contains(&occ) {
        return Err(KittiParseError::OutOfRange {
            line: line_no,
            message: format!("occlusion {occ} not in {{0, 1, 2, 3}}"),
        });
    }
    let box3d = kitti_camera_to_box([nums[11], nums[12], nums[13]], [nums[8], nums[9], nums[10]], nums[14])
        .map_err(|source| KittiParseError::Geometry {
            line: line_no,
            source,
        })?;
    Ok(LabeledBox {
        class,
        truncation,
        occlusion: occ as u8,
        alpha: nums[3],
        bbox2d,
        box3d: Some(box3d),
        score,
    })
}

/// Parses a whole label file; blank lines are skipped.
pub fn parse_kitti_labels(text: &str) -> Result<Vec<LabeledBox>, KittiParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_kitti_label_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAR: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_reference_car_line() {
        let lb = parse_kitti_label_line(CAR, 1).unwrap();
        assert_eq!(lb.class, ObjectClass::Car);
        assert_eq!(lb.occlusion, 0);
        assert_eq!(lb.truncation, 0.0);
        assert_eq!(lb.alpha, -1.58);
        assert_eq!(lb.bbox2d, [587.01, 173.33, 614.12, 200.12]);
        assert_eq!(lb.score, None);
        let b = lb.box3d.unwrap();
        assert_eq!((b.h, b.w, b.l), (1.65, 1.67, 3.64));
        let (loc, ry) = box_to_kitti_camera(&b);
        assert!((loc[0] + 0.65).abs() < 1e-12);
        assert!((loc[1] - 1.71).abs() < 1e-12);
        assert!((loc[2] - 46.70).abs() < 1e-12);
        assert!((ry + 1.59).abs() < 1e-12);
    }

    #[test]
    fn hand_converted_fixture() {
        // location (-0.65, 1.71, 46.70), h = 1.65, ry = -1.59:
        // x = 46.70, y = 0.65, z = -1.71 + 0.825 = -0.885, theta = 1.59 - pi/2.
        let b = parse_kitti_label_line(CAR, 1).unwrap().box3d.unwrap();
        assert_eq!(b.x, 46.70);
        assert_eq!(b.y, 0.65);
        assert!((b.z + 0.885).abs() < 1e-12);
        assert!((b.theta - (1.59 - FRAC_PI_2)).abs() < 1e-12);
        // heading straight ahead (+x) is rotation_y = -pi/2 in camera terms
        let ahead = kitti_camera_to_box([0.0, 1.0, 10.0], [1.5, 1.6, 4.0], -FRAC_PI_2).unwrap();
        assert!(ahead.theta.abs() < 1e-12);
    }

    #[test]
    fn score_column_and_dont_care() {
        let with_score = format!("{CAR} 0.93");
        assert_eq!(parse_kitti_label_line(&with_score, 1).unwrap().score, Some(0.93));
        let dc = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10";
        let lb = parse_kitti_label_line(dc, 3).unwrap();
        assert!(lb.is_ignorable());
        assert!(lb.box3d.is_none());
    }

    #[test]
    fn error_cases_carry_line_numbers() {
        assert_eq!(
            parse_kitti_label_line("Car 0 0", 7),
            Err(KittiParseError::FieldCount { line: 7, found: 3 })
        );
        let bad_num = CAR.replace("46.70", "46,70");
        assert!(matches!(
            parse_kitti_label_line(&bad_num, 2),
            Err(KittiParseError::NotNumeric { line: 2, field: "z", .. })
        ));
        let bad_class = CAR.replace("Car", "Bus");
        assert!(matches!(
            parse_kitti_label_line(&bad_class, 4),
            Err(KittiParseError::UnknownClass { line: 4, .. })
        ));
        let bad_occ = CAR.replacen(" 0 ", " 5 ", 1);
        assert!(matches!(
            parse_kitti_label_line(&bad_occ, 5),
            Err(KittiParseError::OutOfRange { line: 5, .. })
        ));
        let seventeen = format!("{CAR} 0.5 0.5");
        assert!(parse_kitti_label_line(&seventeen, 1).is_err());
    }

    #[test]
    fn whole_files() {
        assert!(parse_kitti_labels("").unwrap().is_empty());
        let text = format!("{CAR}\n\n{CAR}\n");
        assert_eq!(parse_kitti_labels(&text).unwrap().len(), 2);
        let err = parse_kitti_labels(&format!("{CAR}\nCar 1 2\n")).unwrap_err();
        assert!(err.to_string().starts_with("line 2"));
    }
}
