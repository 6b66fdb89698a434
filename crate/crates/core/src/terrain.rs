//! GPX ingestion and slope profiles.
//!
//! Track points are reduced to a piecewise-constant slope over horizontal
//! distance. Elevations go through a 5-point median filter first (GPS
//! altitude spikes otherwise produce absurd short-range grades); the course
//! is then cut into segments of a fixed target length and each segment gets
//! its mean grade.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Mean Earth radius used by the haversine formula [m].
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

const MEDIAN_WINDOW: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TerrainError {
    #[error("GPX parse error: {0}")]
    Parse(String),
    #[error("missing elevation at track point {index}")]
    MissingElevation { index: usize },
    #[error("track point {index} has invalid coordinates ({lat}, {lon})")]
    InvalidCoordinate { index: usize, lat: f64, lon: f64 },
    #[error("need at least 2 distinct track points, found {0}")]
    TooFewPoints(usize),
    #[error("track has zero horizontal length")]
    ZeroLength,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("x = {x} m outside the course [0, {d}] m")]
    OutOfCourse { x: f64, d: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub lat: f64,
    pub lon: f64,
    pub ele: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
}

/// Reads `<trkpt>` elements in document order. Consecutive points with
/// identical coordinates are collapsed to the first.
pub fn parse_gpx(document: &[u8]) -> Result<Vec<TrackPoint>, TerrainError> {
    let text = std::str::from_utf8(document).map_err(|e| TerrainError::Parse(format!("not UTF-8: {e}")))?;
    let doc = roxmltree::Document::parse(text).map_err(|e| TerrainError::Parse(e.to_string()))?;
    let mut out: Vec<TrackPoint> = Vec::new();
    for (index, node) in doc
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "trkpt")
        .enumerate()
    {
        let attr = |name: &str| -> Result<f64, TerrainError> {
            let raw = node
                .attribute(name)
                .ok_or_else(|| TerrainError::Parse(format!("track point {index} lacks '{name}'")))?;
            raw.trim()
                .parse()
                .map_err(|_| TerrainError::Parse(format!("track point {index}: bad {name} '{raw}'")))
        };
        let (lat, lon) = (attr("lat")?, attr("lon")?);
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(TerrainError::InvalidCoordinate { index, lat, lon });
        }
        let child_text = |name: &str| {
            node.children()
                .find(|c| c.is_element() && c.tag_name().name() == name)
                .and_then(|c| c.text())
                .map(str::trim)
        };
        let ele = child_text("ele")
            .ok_or(TerrainError::MissingElevation { index })?
            .parse::<f64>()
            .ok()
            .filter(|e| e.is_finite())
            .ok_or(TerrainError::MissingElevation { index })?;
        let time = child_text("time").map(str::to_owned);
        if out.last().is_some_and(|p| p.lat == lat && p.lon == lon) {
            continue;
        }
        out.push(TrackPoint { lat, lon, ele, time });
    }
    if out.len() < 2 {
        return Err(TerrainError::TooFewPoints(out.len()));
    }
    Ok(out)
}

/// Minimal GPX 1.1 document for `points`, with coordinates printed so that
/// they parse back exactly.
pub fn write_gpx(name: &str, points: &[TrackPoint]) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<gpx version=\"1.1\" creator=\"trailopt\" xmlns=\"http://www.topografix.com/GPX/1/1\">\n");
    let _ = writeln!(s, "  <trk><name>{}</name><trkseg>", xml_escape(name));
    for p in points {
        let _ = write!(s, "    <trkpt lat=\"{}\" lon=\"{}\"><ele>{}</ele>", p.lat, p.lon, p.ele);
        if let Some(t) = &p.time {
            let _ = write!(s, "<time>{}</time>", xml_escape(t));
        }
        s.push_str("</trkpt>\n");
    }
    s.push_str("  </trkseg></trk>\n</gpx>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Great-circle distance ignoring elevation [m].
pub fn horizontal_distance(a: &TrackPoint, b: &TrackPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Piecewise-constant slope over horizontal distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourseProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `x₀ = 0 < x₁ < … < x_n = D` [m].
    pub boundaries: Vec<f64>,
    /// Slope angle per segment [rad].
    pub slopes: Vec<f64>,
    /// Mean altitude per segment [m].
    pub altitudes: Vec<f64>,
    pub total_distance: f64,
    /// Arithmetic mean of the segment altitudes [m].
    pub mean_altitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_time_s: Option<f64>,
}

fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            // the window shrinks symmetrically at the ends so endpoints stay put
            let r = half.min(i).min(n - 1 - i);
            let mut w: Vec<f64> = values[i - r..=i + r].to_vec();
            w.sort_by(f64::total_cmp);
            w[r]
        })
        .collect()
}

/// Linear interpolation of `ys` over increasing `xs`.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let j = xs.partition_point(|&v| v <= x).clamp(1, xs.len() - 1);
    let (x0, x1) = (xs[j - 1], xs[j]);
    if x1 == x0 {
        return ys[j];
    }
    let w = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

/// Integral of the piecewise-linear `(xs, ys)` over `[a, b]`.
fn integral(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    let mut knots = vec![a];
    knots.extend(xs.iter().copied().filter(|&x| x > a && x < b));
    knots.push(b);
    knots
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (interp(xs, ys, w[0]) + interp(xs, ys, w[1])))
        .sum()
}

/// Cumulative horizontal distance and median-filtered elevation per point.
pub fn smoothed_track(points: &[TrackPoint]) -> (Vec<f64>, Vec<f64>) {
    let mut dist = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += horizontal_distance(&points[i - 1], p);
        }
        dist.push(acc);
    }
    let ele: Vec<f64> = points.iter().map(|p| p.ele).collect();
    (dist, median_filter(&ele, MEDIAN_WINDOW))
}

/// Cuts the track into segments of `target_segment_m` (the last one takes
/// the remainder) and computes each segment's mean grade and altitude.
pub fn build_profile(points: &[TrackPoint], target_segment_m: f64) -> Result<CourseProfile, TerrainError> {
    if !(100.0..=250.0).contains(&target_segment_m) {
        return Err(TerrainError::InvalidProfile(format!(
            "segment length must lie in [100, 250] m, got {target_segment_m}"
        )));
    }
    if points.len() < 2 {
        return Err(TerrainError::TooFewPoints(points.len()));
    }
    let (dist, ele) = smoothed_track(points);
    let d = *dist.last().unwrap();
    if !(d > 0.0) {
        return Err(TerrainError::ZeroLength);
    }
    if d <= target_segment_m {
        return Err(TerrainError::InvalidProfile(format!(
            "track length {d:.1} m does not exceed the segment length {target_segment_m} m"
        )));
    }
    let mut boundaries = vec![0.0];
    let mut k = 1.0;
    while k * target_segment_m < d - 1e-6 {
        boundaries.push(k * target_segment_m);
        k += 1.0;
    }
    boundaries.push(d);
    let mut slopes = Vec::with_capacity(boundaries.len() - 1);
    let mut altitudes = Vec::with_capacity(boundaries.len() - 1);
    for w in boundaries.windows(2) {
        let (a, b) = (w[0], w[1]);
        let rise = interp(&dist, &ele, b) - interp(&dist, &ele, a);
        slopes.push((rise / (b - a)).atan());
        altitudes.push(integral(&dist, &ele, a, b) / (b - a));
    }
    let mean_altitude = altitudes.iter().sum::<f64>() / altitudes.len() as f64;
    Ok(CourseProfile {
        name: None,
        boundaries,
        slopes,
        altitudes,
        total_distance: d,
        mean_altitude,
        record_time_s: None,
    })
}

impl CourseProfile {
    /// Builds a profile from explicit segments `(length [m], slope [rad])`
    /// starting at `start_altitude_m`.
    pub fn from_segments(segments: &[(f64, f64)], start_altitude_m: f64) -> Result<Self, TerrainError> {
        if segments.is_empty() {
            return Err(TerrainError::InvalidProfile("no segments".into()));
        }
        let mut boundaries = vec![0.0];
        let mut slopes = Vec::new();
        let mut altitudes = Vec::new();
        let mut alt = start_altitude_m;
        for &(len, a) in segments {
            let rise = len * a.tan();
            altitudes.push(alt + 0.5 * rise);
            alt += rise;
            boundaries.push(boundaries.last().unwrap() + len);
            slopes.push(a);
        }
        let p = Self {
            name: None,
            total_distance: *boundaries.last().unwrap(),
            mean_altitude: altitudes.iter().sum::<f64>() / altitudes.len() as f64,
            boundaries,
            slopes,
            altitudes,
            record_time_s: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// A level course of length `d` metres at sea level.
    pub fn flat(d: f64) -> Result<Self, TerrainError> {
        Self::from_segments(&[(d, 0.0)], 0.0)
    }

    pub fn with_record(mut self, record_time_s: f64) -> Self {
        self.record_time_s = Some(record_time_s);
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = Some(name.to_owned());
        self
    }

    pub fn segment_count(&self) -> usize {
        self.slopes.len()
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        let n = self.slopes.len();
        let bad = |m: &str| Err(TerrainError::InvalidProfile(m.into()));
        if n == 0 || self.boundaries.len() != n + 1 || self.altitudes.len() != n {
            return bad("boundaries, slopes and altitudes must describe the same segments");
        }
        if self.boundaries[0] != 0.0 || self.boundaries.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("boundaries must start at 0 and increase strictly");
        }
        if ((self.boundaries[n] - self.total_distance) / self.total_distance).abs() > 1e-9 {
            return bad("last boundary must equal the total distance");
        }
        if self.slopes.iter().any(|a| !(a.abs() < std::f64::consts::FRAC_PI_2)) {
            return bad("slopes must lie in (-pi/2, pi/2)");
        }
        if self.record_time_s.is_some_and(|t| !(t > 0.0)) {
            return bad("record time must be positive");
        }
        Ok(())
    }

    /// Slope of the segment containing `x`; right-continuous, and `x = D`
    /// belongs to the last segment.
    pub fn slope_at(&self, x: f64) -> Result<f64, TerrainError> {
        if !(0.0..=self.total_distance).contains(&x) {
            return Err(TerrainError::OutOfCourse {
                x,
                d: self.total_distance,
            });
        }
        let i = self.boundaries.partition_point(|&b| b <= x).saturating_sub(1);
        Ok(self.slopes[i.min(self.slopes.len() - 1)])
    }

    /// Total ascent and descent [m].
    pub fn gain_loss(&self) -> (f64, f64) {
        let mut gain = 0.0;
        let mut loss = 0.0;
        for (i, a) in self.slopes.iter().enumerate() {
            let rise = (self.boundaries[i + 1] - self.boundaries[i]) * a.tan();
            if rise > 0.0 {
                gain += rise;
            } else {
                loss -= rise;
            }
        }
        (gain, loss)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, TerrainError> {
        let p: Self = serde_json::from_str(s).map_err(|e| TerrainError::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Points marching east along the equator, one every `step` metres.
    fn equator_track(n: usize, step: f64, ele: impl Fn(f64) -> f64) -> Vec<TrackPoint> {
        let deg = step / (EARTH_RADIUS_M * std::f64::consts::PI / 180.0);
        (0..n)
            .map(|i| TrackPoint {
                lat: 0.0,
                lon: i as f64 * deg,
                ele: ele(i as f64 * step),
                time: None,
            })
            .collect()
    }

    #[test]
    fn minimal_gpx() {
        let doc = r#"<gpx><trk><trkseg>
            <trkpt lat="45.0" lon="7.0"><ele>1000</ele></trkpt>
            <trkpt lat="45.001" lon="7.0"><ele>1010</ele><time>2023-01-01T00:00:00Z</time></trkpt>
        </trkseg></trk></gpx>"#;
        let pts = parse_gpx(doc.as_bytes()).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].time.as_deref(), Some("2023-01-01T00:00:00Z"));
    }

    #[test]
    fn gpx_errors() {
        let no_ele = r#"<gpx><trk><trkseg><trkpt lat="1" lon="1"/><trkpt lat="2" lon="1"/></trkseg></trk></gpx>"#;
        let e = parse_gpx(no_ele.as_bytes()).unwrap_err();
        assert_eq!(e, TerrainError::MissingElevation { index: 0 });
        assert!(e.to_string().contains("missing elevation"));
        assert!(matches!(parse_gpx(b"<gpx><trk>"), Err(TerrainError::Parse(_))));
        let one =
            r#"<gpx><trkpt lat="1" lon="1"><ele>3</ele></trkpt><trkpt lat="1" lon="1"><ele>4</ele></trkpt></gpx>"#;
        assert_eq!(parse_gpx(one.as_bytes()).unwrap_err(), TerrainError::TooFewPoints(1));
        let bad =
            r#"<gpx><trkpt lat="91" lon="1"><ele>3</ele></trkpt><trkpt lat="1" lon="1"><ele>4</ele></trkpt></gpx>"#;
        assert!(matches!(
            parse_gpx(bad.as_bytes()),
            Err(TerrainError::InvalidCoordinate { index: 0, .. })
        ));
    }

    #[test]
    fn generated_gpx_round_trips_exactly() {
        let pts: Vec<TrackPoint> = (0..1000)
            .map(|i| {
                let t = i as f64;
                TrackPoint {
                    lat: 46.0 + 1e-4 * t + 1e-7 * (t * 0.37).sin(),
                    lon: 7.5 - 3e-5 * t,
                    ele: 1200.0 + 0.731 * t,
                    time: None,
                }
            })
            .collect();
        assert_eq!(parse_gpx(write_gpx("synthetic & co", &pts).as_bytes()).unwrap(), pts);
    }

    #[test]
    fn haversine_reference_values() {
        let p = |lat, lon| TrackPoint {
            lat,
            lon,
            ele: 0.0,
            time: None,
        };
        assert_eq!(horizontal_distance(&p(10.0, 20.0), &p(10.0, 20.0)), 0.0);
        let d = horizontal_distance(&p(0.0, 0.0), &p(0.0, 1.0));
        assert!((d - 111_194.93).abs() < 0.01, "{d}");
    }

    proptest! {
        #[test]
        fn haversine_is_symmetric(a in -89.0f64..89.0, b in -179.0f64..179.0, c in -89.0f64..89.0, d in -179.0f64..179.0) {
            let p = TrackPoint { lat: a, lon: b, ele: 0.0, time: None };
            let q = TrackPoint { lat: c, lon: d, ele: 5.0, time: None };
            prop_assert_eq!(horizontal_distance(&p, &q), horizontal_distance(&q, &p));
        }

        #[test]
        fn slope_lookup_matches_linear_scan(x in 0.0f64..=1.0) {
            let segs: Vec<(f64, f64)> = (0..37).map(|i| (100.0 + 3.0 * i as f64, 0.01 * ((i * 7) % 11) as f64 - 0.05)).collect();
            let prof = CourseProfile::from_segments(&segs, 0.0).unwrap();
            let x = x * prof.total_distance;
            let mut want = *prof.slopes.last().unwrap();
            for i in 0..prof.segment_count() {
                if x >= prof.boundaries[i] && x < prof.boundaries[i + 1] {
                    want = prof.slopes[i];
                    break;
                }
            }
            prop_assert_eq!(prof.slope_at(x).unwrap(), want);
        }

        #[test]
        fn segment_lengths_sum_to_distance(len in 100.0f64..=250.0, n in 20usize..200) {
            let pts = equator_track(n, 37.0, |x| 300.0 + 20.0 * (x / 500.0).sin());
            prop_assume!(37.0 * (n - 1) as f64 > len);
            let prof = build_profile(&pts, len).unwrap();
            let sum: f64 = prof.boundaries.windows(2).map(|w| w[1] - w[0]).sum();
            prop_assert!((sum / prof.total_distance - 1.0).abs() < 1e-6);
            let k = prof.segment_count();
            for w in prof.boundaries[..k].windows(2) {
                prop_assert!((w[1] - w[0] - len).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_elevation_is_flat() {
        let prof = build_profile(&equator_track(200, 25.0, |_| 812.0), 150.0).unwrap();
        assert!(prof.slopes.iter().all(|&a| a == 0.0));
        assert!((prof.mean_altitude - 812.0).abs() < 1e-9);
    }

    #[test]
    fn ramp_recovers_its_grade() {
        let prof = build_profile(&equator_track(101, 10.0, |x| 0.1 * x), 100.0).unwrap();
        assert_eq!(prof.segment_count(), 10);
        for a in &prof.slopes {
            assert!((a - 0.1f64.atan()).abs() < 1e-6);
        }
    }

    #[test]
    fn median_filter_removes_spikes() {
        let prof = build_profile(
            &equator_track(201, 10.0, |x| if x == 500.0 { 400.0 } else { 100.0 }),
            100.0,
        )
        .unwrap();
        assert!(prof.slopes.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn uphill_course_gain() {
        // 20.5 km with 2300 m of climbing, steeper in the middle
        let d = 20_500.0;
        let ele = |x: f64| {
            let s = x / d;
            2300.0 * (s - (2.0 * std::f64::consts::PI * s).sin() / (2.0 * std::f64::consts::PI) * 0.8)
        };
        let pts = equator_track(2051, 10.0, ele);
        let prof = build_profile(&pts, 150.0).unwrap();
        let (gain, loss) = prof.gain_loss();
        assert!((gain - 2300.0).abs() <= 1.0, "{gain}");
        assert!(loss < 1e-9);
    }

    #[test]
    fn segment_count_for_twenty_km() {
        let pts = equator_track(2001, 10.0, |_| 0.0);
        let prof = build_profile(&pts, 150.0).unwrap();
        assert!(matches!(prof.segment_count(), 133 | 134));
    }

    #[test]
    fn profile_errors() {
        let pts = equator_track(3, 10.0, |_| 0.0);
        assert!(build_profile(&pts, 150.0).is_err());
        assert!(build_profile(&pts, 50.0).is_err());
        let prof = CourseProfile::flat(1000.0).unwrap();
        assert!(prof.slope_at(1000.0).is_ok());
        assert!(prof.slope_at(1000.1).is_err());
        assert!(prof.slope_at(-0.1).is_err());
    }

    #[test]
    fn profile_json_round_trip() {
        let prof = CourseProfile::from_segments(&[(120.0, 0.1), (130.0, -0.05)], 50.0)
            .unwrap()
            .with_record(3600.0)
            .with_name("test");
        assert_eq!(CourseProfile::from_json(&prof.to_json()).unwrap(), prof);
        let mut broken = prof.clone();
        broken.slopes.pop();
        assert!(CourseProfile::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn deterministic_construction() {
        let pts = equator_track(500, 13.0, |x| (x / 77.0).sin() * 30.0);
        assert_eq!(build_profile(&pts, 200.0).unwrap(), build_profile(&pts, 200.0).unwrap());
    }
}
