//! Line-oriented text formats for datasets and estimates.
//!
//! Numbers are written with nine significant digits in plain decimal, which
//! keeps serialization deterministic and makes serialize(parse(f)) = f for
//! canonical files.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::measurements::RangeBearing;
use crate::pipeline::SolvedMap;
use crate::sim::{Dataset, NoiseSpec, OdometryRecord};

/// Format with nine significant digits, trailing zeros trimmed, no exponent.
pub fn format_number(x: f64) -> String {
    assert!(x.is_finite(), "refusing to serialize non-finite number");
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{x:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("numeric exponent");
    let neg = mant.starts_with('-');
    let digits: String = mant.chars().filter(|c| c.is_ascii_digit()).collect();
    let point = exp + 1;
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    if point <= 0 {
        out.push_str("0.");
        for _ in 0..(-point) {
            out.push('0');
        }
        out.push_str(&digits);
    } else if point as usize >= digits.len() {
        out.push_str(&digits);
        for _ in 0..(point as usize - digits.len()) {
            out.push('0');
        }
    } else {
        out.push_str(&digits[..point as usize]);
        out.push('.');
        out.push_str(&digits[point as usize..]);
    }
    if out.contains('.') {
        while out.ends_with('0') {
            out.pop();
        }
        if out.ends_with('.') {
            out.pop();
        }
    }
    out
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad number '{tok}'") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite number '{tok}'") });
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad index '{tok}'") })
}

fn expect_arity(fields: &[&str], n: usize, line: usize) -> Result<()> {
    if fields.len() != n + 1 {
        return Err(Error::Parse {
            line,
            msg: format!("{} expects {} fields, got {}", fields[0], n, fields.len() - 1),
        });
    }
    Ok(())
}

pub fn serialize_dataset(ds: &Dataset) -> String {
    let mut out = String::from("# rfm-slam dataset\n");
    out.push_str(&format!("SEED {}\n", ds.seed));
    let n = &ds.noise;
    out.push_str(&format!(
        "NOISE {} {} {} {} {} {} {}\n",
        format_number(n.alpha),
        format_number(n.beta),
        format_number(n.base_rb[0]),
        format_number(n.base_rb[1].to_degrees()),
        format_number(n.base_odo[0]),
        format_number(n.base_odo[1]),
        format_number(n.base_odo[2].to_degrees()),
    ));
    for (i, p) in ds.poses_gt.iter().enumerate() {
        out.push_str(&format!(
            "POSE_GT {i} {} {} {}\n",
            format_number(p.x),
            format_number(p.y),
            format_number(p.theta)
        ));
    }
    for (i, l) in ds.landmarks_gt.iter().enumerate() {
        out.push_str(&format!(
            "LANDMARK_GT {i} {} {}\n",
            format_number(l.x),
            format_number(l.y)
        ));
    }
    for o in &ds.odometry {
        out.push_str(&format!(
            "ODOM {} {} {} {} {} {} {} {}\n",
            o.from_pose,
            o.to_pose,
            format_number(o.dx),
            format_number(o.dy),
            format_number(o.dtheta),
            format_number(o.var_x),
            format_number(o.var_y),
            format_number(o.var_t)
        ));
    }
    for z in &ds.observations {
        out.push_str(&format!(
            "RB {} {} {} {} {} {}\n",
            z.pose_id,
            z.landmark_id,
            format_number(z.range),
            format_number(z.bearing),
            format_number(z.sigma_r2),
            format_number(z.sigma_b2)
        ));
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut seed: Option<u64> = None;
    let mut noise: Option<NoiseSpec> = None;
    let mut poses: Vec<(usize, Pose2)> = Vec::new();
    let mut landmarks: Vec<(usize, Vector2<f64>)> = Vec::new();
    let mut odometry: Vec<OdometryRecord> = Vec::new();
    let mut observations: Vec<RangeBearing> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = trimmed.split_whitespace().collect();
        match f[0] {
            "SEED" => {
                expect_arity(&f, 1, line)?;
                seed = Some(
                    f[1].parse()
                        .map_err(|_| Error::Parse { line, msg: format!("bad seed '{}'", f[1]) })?,
                );
            }
            "NOISE" => {
                expect_arity(&f, 7, line)?;
                let v: Vec<f64> =
                    f[1..].iter().map(|t| parse_f64(t, line)).collect::<Result<_>>()?;
                noise = Some(NoiseSpec {
                    alpha: v[0],
                    beta: v[1],
                    base_rb: [v[2], v[3].to_radians()],
                    base_odo: [v[4], v[5], v[6].to_radians()],
                });
            }
            "POSE_GT" => {
                expect_arity(&f, 4, line)?;
                let id = parse_usize(f[1], line)?;
                poses.push((
                    id,
                    Pose2::new(
                        parse_f64(f[2], line)?,
                        parse_f64(f[3], line)?,
                        parse_f64(f[4], line)?,
                    ),
                ));
            }
            "LANDMARK_GT" => {
                expect_arity(&f, 3, line)?;
                let id = parse_usize(f[1], line)?;
                landmarks.push((id, Vector2::new(parse_f64(f[2], line)?, parse_f64(f[3], line)?)));
            }
            "ODOM" => {
                expect_arity(&f, 8, line)?;
                odometry.push(OdometryRecord {
                    from_pose: parse_usize(f[1], line)?,
                    to_pose: parse_usize(f[2], line)?,
                    dx: parse_f64(f[3], line)?,
                    dy: parse_f64(f[4], line)?,
                    dtheta: parse_f64(f[5], line)?,
                    var_x: parse_f64(f[6], line)?,
                    var_y: parse_f64(f[7], line)?,
                    var_t: parse_f64(f[8], line)?,
                });
            }
            "RB" => {
                expect_arity(&f, 6, line)?;
                observations.push(RangeBearing {
                    pose_id: parse_usize(f[1], line)?,
                    landmark_id: parse_usize(f[2], line)?,
                    range: parse_f64(f[3], line)?,
                    bearing: parse_f64(f[4], line)?,
                    sigma_r2: parse_f64(f[5], line)?,
                    sigma_b2: parse_f64(f[6], line)?,
                });
            }
            tag => {
                return Err(Error::Parse { line, msg: format!("unknown record tag '{tag}'") });
            }
        }
    }

    let seed = seed.ok_or_else(|| Error::Validation("missing SEED record".into()))?;
    let noise = noise.ok_or_else(|| Error::Validation("missing NOISE record".into()))?;
    let poses_gt = dense_by_id(poses, "pose")?;
    let landmarks_gt = dense_by_id(landmarks, "landmark")?;
    odometry.sort_by_key(|o| o.from_pose);

    let ds = Dataset {
        poses_gt,
        landmarks_gt,
        odometry,
        observations,
        noise,
        seed,
        // Sensor limits are not part of the file format; they only matter
        // when generating data.
        max_range: f64::INFINITY,
        fov: std::f64::consts::TAU,
    };
    ds.validate()?;
    Ok(ds)
}

fn dense_by_id<T: Copy>(mut items: Vec<(usize, T)>, what: &str) -> Result<Vec<T>> {
    items.sort_by_key(|&(id, _)| id);
    for (k, &(id, _)) in items.iter().enumerate() {
        if id != k {
            return Err(Error::Validation(format!(
                "{what} ids must be dense from 0; found id {id} at position {k}"
            )));
        }
    }
    Ok(items.into_iter().map(|(_, v)| v).collect())
}

pub fn serialize_estimate(map: &SolvedMap) -> String {
    let mut out = String::from("# rfm-slam estimate\n");
    for (i, p) in map.poses.iter().enumerate() {
        out.push_str(&format!(
            "POSE_EST {i} {} {} {}\n",
            format_number(p.x),
            format_number(p.y),
            format_number(p.theta)
        ));
    }
    for (id, l) in &map.landmarks {
        out.push_str(&format!(
            "LANDMARK_EST {id} {} {}\n",
            format_number(l.x),
            format_number(l.y)
        ));
    }
    out
}

pub fn parse_estimate(text: &str) -> Result<SolvedMap> {
    let mut poses: Vec<(usize, Pose2)> = Vec::new();
    let mut landmarks: Vec<(usize, Vector2<f64>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = trimmed.split_whitespace().collect();
        match f[0] {
            "POSE_EST" => {
                expect_arity(&f, 4, line)?;
                poses.push((
                    parse_usize(f[1], line)?,
                    Pose2::new(
                        parse_f64(f[2], line)?,
                        parse_f64(f[3], line)?,
                        parse_f64(f[4], line)?,
                    ),
                ));
            }
            "LANDMARK_EST" => {
                expect_arity(&f, 3, line)?;
                landmarks.push((
                    parse_usize(f[1], line)?,
                    Vector2::new(parse_f64(f[2], line)?, parse_f64(f[3], line)?),
                ));
            }
            tag => {
                return Err(Error::Parse { line, msg: format!("unknown record tag '{tag}'") });
            }
        }
    }
    let poses = dense_by_id(poses, "pose")?;
    landmarks.sort_by_key(|&(id, _)| id);
    for w in landmarks.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Validation(format!("duplicate landmark id {}", w[0].0)));
        }
    }
    Ok(SolvedMap { poses, landmarks })
}
