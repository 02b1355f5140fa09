//! Track ingestion, scene windowing, maneuver labeling, dataset splits, the
//! binary scene cache, and a synthetic traffic generator.
//!
//! Internally every distance is in meters and every scene is sampled at a
//! fixed frame interval `dt`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{chord_heading, CartPoint, Frame};
use crate::model::{Lateral, Longitudinal, ManeuverClass};
use crate::{CoreError, Result};

pub const FEET_TO_METERS: f64 = 0.3048;
pub const DEFAULT_DT: f64 = 0.2;
pub const LANE_WIDTH: f64 = 3.5;
pub const LATERAL_THRESHOLD: f64 = 1.75;
pub const BRAKE_RATIO: f64 = 0.9;
pub const ACCELERATE_RATIO: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Keep,
    Merge,
    Left,
    Right,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Keep, SplitTag::Merge, SplitTag::Left, SplitTag::Right];

    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Keep => "keep",
            SplitTag::Merge => "merge",
            SplitTag::Left => "left",
            SplitTag::Right => "right",
        }
    }

    fn from_lateral(l: Lateral) -> Self {
        match l {
            Lateral::Left => SplitTag::Left,
            Lateral::Keep => SplitTag::Keep,
            Lateral::Right => SplitTag::Right,
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    /// Aligned with the ego history; `None` where the agent is not observed.
    pub history: Vec<Option<CartPoint>>,
}

/// One prediction instance. The last history point is the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub ego_id: u64,
    /// Source frame index of the reference frame.
    pub ref_frame: i64,
    pub ego_history: Vec<CartPoint>,
    /// Frames strictly after the reference frame; may be empty for inference.
    pub ego_future: Vec<CartPoint>,
    pub neighbors: Vec<Neighbor>,
    /// Ego lane over history then future; empty when unknown.
    pub ego_lanes: Vec<Option<i64>>,
    pub maneuver: ManeuverClass,
    pub split_tag: SplitTag,
}

impl Scene {
    pub fn reference_point(&self) -> Option<CartPoint> {
        self.ego_history.last().copied()
    }

    /// Applies `f` to every position in the scene.
    pub fn map_points(&self, f: impl Fn(CartPoint) -> CartPoint) -> Scene {
        let mut s = self.clone();
        s.ego_history.iter_mut().for_each(|p| *p = f(*p));
        s.ego_future.iter_mut().for_each(|p| *p = f(*p));
        for n in s.neighbors.iter_mut() {
            n.history.iter_mut().flatten().for_each(|p| *p = f(*p));
        }
        s
    }
}

// ---------------------------------------------------------------- ingestion

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Feet,
    Meters,
}

impl Unit {
    pub fn to_meters(self) -> f64 {
        match self {
            Unit::Feet => FEET_TO_METERS,
            Unit::Meters => 1.0,
        }
    }
}

/// Header names of the required columns. `lane` is optional.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame: String,
    pub x: String,
    pub y: String,
    pub lane: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vehicle_id: "vehicle_id".into(),
            frame: "frame".into(),
            x: "x".into(),
            y: "y".into(),
            lane: Some("lane_id".into()),
        }
    }
}

impl ColumnMap {
    /// Vehicle_ID / Frame_ID / Local_X / Local_Y / Lane_ID.
    pub fn ngsim() -> Self {
        Self {
            vehicle_id: "Vehicle_ID".into(),
            frame: "Frame_ID".into(),
            x: "Local_X".into(),
            y: "Local_Y".into(),
            lane: Some("Lane_ID".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub vehicle_id: u64,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub lane: Option<i64>,
}

impl TrackRow {
    pub fn point(&self) -> CartPoint {
        CartPoint::new(self.x, self.y)
    }
}

/// Rows sorted by `(vehicle_id, frame)`, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTable {
    pub rows: Vec<TrackRow>,
    pub dt: f64,
}

/// A maximal run of consecutive frames of one vehicle.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub vehicle_id: u64,
    pub rows: &'a [TrackRow],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub unit: Unit,
    /// Source frame interval in seconds.
    pub dt: f64,
    /// Keep every `stride`-th source frame.
    pub stride: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            unit: Unit::Meters,
            dt: DEFAULT_DT,
            stride: 1,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| CoreError::MissingColumn(name.to_string()))
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| CoreError::Parse {
        line,
        msg: format!("cannot parse {name} from {raw:?}"),
    })
}

pub fn ingest_csv(path: &Path, columns: &ColumnMap, options: IngestOptions) -> Result<TrackTable> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, columns, options)
}

pub fn ingest_reader<R: Read>(reader: R, columns: &ColumnMap, options: IngestOptions) -> Result<TrackTable> {
    if !(options.dt > 0.0 && options.dt.is_finite()) || options.stride == 0 {
        return Err(CoreError::InvalidInput("dt must be positive and stride >= 1".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CoreError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(CoreError::Empty("no header row".into()));
    }
    let headers = headers.clone();
    let id_col = column(&headers, &columns.vehicle_id)?;
    let frame_col = column(&headers, &columns.frame)?;
    let x_col = column(&headers, &columns.x)?;
    let y_col = column(&headers, &columns.y)?;
    let lane_col = columns.lane.as_deref().map(|l| column(&headers, l)).transpose()?;
    let scale = options.unit.to_meters();

    let mut rows = Vec::new();
    let mut seen: HashMap<(u64, i64), u64> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CoreError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let vehicle_id = parse_field(&record, id_col, &columns.vehicle_id, line)?;
        let frame: i64 = parse_field(&record, frame_col, &columns.frame, line)?;
        let x: f64 = parse_field(&record, x_col, &columns.x, line)?;
        let y: f64 = parse_field(&record, y_col, &columns.y, line)?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(CoreError::Parse {
                line,
                msg: "non-finite coordinate".into(),
            });
        }
        let lane = match lane_col {
            Some(c) if !record.get(c).unwrap_or("").trim().is_empty() => {
                Some(parse_field(&record, c, columns.lane.as_deref().unwrap_or("lane"), line)?)
            }
            _ => None,
        };
        if let Some(first) = seen.insert((vehicle_id, frame), line) {
            return Err(CoreError::Parse {
                line,
                msg: format!("duplicate row for vehicle {vehicle_id} frame {frame} (first on line {first})"),
            });
        }
        let stride = options.stride as i64;
        if frame.rem_euclid(stride) != 0 {
            continue;
        }
        rows.push(TrackRow {
            vehicle_id,
            frame: frame.div_euclid(stride),
            x: x * scale,
            y: y * scale,
            lane,
        });
    }
    if seen.is_empty() {
        return Err(CoreError::Empty("no data rows".into()));
    }
    rows.sort_by_key(|r| (r.vehicle_id, r.frame));
    Ok(TrackTable {
        rows,
        dt: options.dt * options.stride as f64,
    })
}

impl TrackTable {
    pub fn segments(&self) -> Vec<Segment<'_>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            let split = i == self.rows.len()
                || self.rows[i].vehicle_id != self.rows[i - 1].vehicle_id
                || self.rows[i].frame != self.rows[i - 1].frame + 1;
            if split {
                out.push(Segment {
                    vehicle_id: self.rows[start].vehicle_id,
                    rows: &self.rows[start..i],
                });
                start = i;
            }
        }
        out
    }

    /// Writes the table in meters with the default column names.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["vehicle_id", "frame", "x", "y", "lane_id"])
            .map_err(io::Error::from)?;
        for r in &self.rows {
            let lane = r.lane.map(|l| l.to_string()).unwrap_or_default();
            w.write_record([
                r.vehicle_id.to_string(),
                r.frame.to_string(),
                r.x.to_string(),
                r.y.to_string(),
                lane,
            ])
            .map_err(io::Error::from)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------- windowing

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    /// History seconds; includes the reference frame.
    pub t_h: f64,
    pub t_f: f64,
    /// Neighbors within this distance of the ego at the reference frame are
    /// captured (twice the graph threshold by default).
    pub capture_radius: f64,
    /// Frames between consecutive reference frames of one ego.
    pub stride: usize,
    /// Lanes whose egos are tagged as merging.
    pub merge_lanes: Vec<i64>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_h: 3.0,
            t_f: 5.0,
            capture_radius: 2.0 * 7.62,
            stride: 5,
            merge_lanes: Vec::new(),
        }
    }
}

fn frames_of(seconds: f64, dt: f64) -> usize {
    (seconds / dt).round() as usize
}

/// Sliding-window scenes, ordered by ego id then reference frame.
pub fn window_scenes(table: &TrackTable, config: &WindowConfig) -> Result<Vec<Scene>> {
    let h = frames_of(config.t_h, table.dt);
    let f = frames_of(config.t_f, table.dt);
    if h < 1 || f < 1 || config.stride == 0 {
        return Err(CoreError::InvalidInput("windows need t_h, t_f >= one frame and stride >= 1".into()));
    }
    let mut by_frame: HashMap<i64, Vec<usize>> = HashMap::new();
    let mut index: HashMap<(u64, i64), usize> = HashMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        by_frame.entry(r.frame).or_default().push(i);
        index.insert((r.vehicle_id, r.frame), i);
    }
    let merge: HashSet<i64> = config.merge_lanes.iter().copied().collect();
    let mut scenes = Vec::new();
    for seg in table.segments() {
        if seg.rows.len() < h + f {
            continue;
        }
        for start in (0..=seg.rows.len() - (h + f)).step_by(config.stride) {
            let window = &seg.rows[start..start + h + f];
            let reference = window[h - 1];
            let origin = reference.point();
            let mut neighbors: Vec<Neighbor> = by_frame[&reference.frame]
                .iter()
                .map(|&i| table.rows[i])
                .filter(|r| r.vehicle_id != seg.vehicle_id && r.point().distance(origin) <= config.capture_radius)
                .map(|r| Neighbor {
                    id: r.vehicle_id,
                    history: window[..h]
                        .iter()
                        .map(|w| index.get(&(r.vehicle_id, w.frame)).map(|&i| table.rows[i].point()))
                        .collect(),
                })
                .collect();
            neighbors.sort_by_key(|n| n.id);
            let mut scene = Scene {
                ego_id: seg.vehicle_id,
                ref_frame: reference.frame,
                ego_history: window[..h].iter().map(TrackRow::point).collect(),
                ego_future: window[h..].iter().map(TrackRow::point).collect(),
                neighbors,
                ego_lanes: window.iter().map(|r| r.lane).collect(),
                maneuver: ManeuverClass::default(),
                split_tag: SplitTag::Keep,
            };
            scene.maneuver = label_scene(&scene, table.dt)?;
            scene.split_tag = match reference.lane {
                Some(l) if merge.contains(&l) => SplitTag::Merge,
                _ => SplitTag::from_lateral(scene.maneuver.lateral),
            };
            scenes.push(scene);
        }
    }
    Ok(scenes)
}

fn mean_speed(points: &[CartPoint], dt: f64) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points.windows(2).map(|w| w[0].distance(w[1])).sum();
    total / ((points.len() - 1) as f64 * dt)
}

/// Maneuver of the ego from its trajectory and (optionally) lane ids.
///
/// Lateral: a change of lane id between the reference frame and the last
/// future frame (ids grow to the right); without lane ids, the lateral
/// displacement in the heading frame against `±LATERAL_THRESHOLD`.
/// Longitudinal: ratio of mean future to mean history speed.
pub fn label_maneuver(
    history: &[CartPoint],
    future: &[CartPoint],
    lanes: &[Option<i64>],
    dt: f64,
) -> Result<ManeuverClass> {
    let (Some(&origin), Some(&end)) = (history.last(), future.last()) else {
        return Err(CoreError::InvalidInput("labeling needs history and future".into()));
    };
    let h = history.len();
    let lane_change = match (lanes.get(h - 1).copied().flatten(), lanes.last().copied().flatten()) {
        (Some(a), Some(b)) if lanes.len() == h + future.len() => Some(b.cmp(&a)),
        _ => None,
    };
    let lateral = match lane_change {
        Some(std::cmp::Ordering::Less) => Lateral::Left,
        Some(std::cmp::Ordering::Greater) => Lateral::Right,
        Some(std::cmp::Ordering::Equal) => Lateral::Keep,
        None => {
            let heading = chord_heading(history).unwrap_or(FRAC_PI_2);
            let local = Frame::with_heading(origin, heading).to_local(end);
            // Local +y is the heading, so local -x is the left.
            let left = -local.x;
            if left > LATERAL_THRESHOLD {
                Lateral::Left
            } else if left < -LATERAL_THRESHOLD {
                Lateral::Right
            } else {
                Lateral::Keep
            }
        }
    };
    let v_hist = mean_speed(history, dt);
    let mut with_origin = Vec::with_capacity(future.len() + 1);
    with_origin.push(origin);
    with_origin.extend_from_slice(future);
    let v_fut = mean_speed(&with_origin, dt);
    let longitudinal = if v_hist <= 1e-9 {
        if v_fut > 1e-9 {
            Longitudinal::Accelerate
        } else {
            Longitudinal::Maintain
        }
    } else {
        let ratio = v_fut / v_hist;
        if ratio < BRAKE_RATIO {
            Longitudinal::Brake
        } else if ratio > ACCELERATE_RATIO {
            Longitudinal::Accelerate
        } else {
            Longitudinal::Maintain
        }
    };
    Ok(ManeuverClass::new(lateral, longitudinal))
}

pub fn label_scene(scene: &Scene, dt: f64) -> Result<ManeuverClass> {
    label_maneuver(&scene.ego_history, &scene.ego_future, &scene.ego_lanes, dt)
}

// ---------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Overall,
    ManeuverBased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
    /// Test scenes by tag; filled in maneuver-based mode.
    pub test_by_tag: BTreeMap<SplitTag, Vec<Scene>>,
}

/// Seeded shuffle split. `subsample` in `(0, 1]` keeps that fraction of the
/// training part.
pub fn split_dataset(
    scenes: &[Scene],
    fractions: [f64; 3],
    mode: SplitMode,
    seed: u64,
    subsample: f64,
) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidInput(format!("split fractions {fractions:?} must sum to 1")));
    }
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(CoreError::InvalidInput(format!("subsample {subsample} not in (0, 1]")));
    }
    let n = scenes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, frac, count) in [("train", fractions[0], n_train), ("val", fractions[1], n_val), ("test", fractions[2], n_test)] {
        if frac > 0.0 && count == 0 {
            return Err(CoreError::Empty(format!("{name} split of {n} scenes")));
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    let keep = ((subsample * n_train as f64).ceil() as usize).clamp(n_train.min(1), n_train);
    let train = pick(&order[..keep]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);
    let mut test_by_tag = BTreeMap::new();
    if mode == SplitMode::ManeuverBased {
        for tag in SplitTag::ALL {
            test_by_tag.insert(tag, test.iter().filter(|s| s.split_tag == tag).cloned().collect());
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        test,
        test_by_tag,
    })
}

// ---------------------------------------------------------------- cache

pub const CACHE_MAGIC: &[u8; 4] = b"BATS";
pub const CACHE_VERSION: u32 = 1;
const NO_LANE: i64 = i64::MIN;

struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn point(&mut self, p: CartPoint) {
        self.f64(p.x);
        self.f64(p.y);
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(CoreError::Format("truncated scene cache".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn point(&mut self) -> Result<CartPoint> {
        Ok(CartPoint::new(self.f64()?, self.f64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n as usize > self.data.len() {
            return Err(CoreError::Format(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
}

fn encode_scene(s: &Scene) -> Vec<u8> {
    let mut b = Buf(Vec::new());
    b.u64(s.ego_id);
    b.i64(s.ref_frame);
    b.u8(s.maneuver.lateral as u8);
    b.u8(s.maneuver.longitudinal as u8);
    b.u8(s.split_tag as u8);
    b.u64(s.ego_history.len() as u64);
    s.ego_history.iter().for_each(|&p| b.point(p));
    b.u64(s.ego_future.len() as u64);
    s.ego_future.iter().for_each(|&p| b.point(p));
    b.u64(s.ego_lanes.len() as u64);
    s.ego_lanes.iter().for_each(|l| b.i64(l.unwrap_or(NO_LANE)));
    b.u64(s.neighbors.len() as u64);
    for n in &s.neighbors {
        b.u64(n.id);
        b.u64(n.history.len() as u64);
        for p in &n.history {
            b.u8(u8::from(p.is_some()));
            b.point(p.unwrap_or_default());
        }
    }
    b.0
}

fn decode_scene(c: &mut Cursor<'_>) -> Result<Scene> {
    let ego_id = c.u64()?;
    let ref_frame = c.i64()?;
    let lat = c.u8()? as usize;
    let lon = c.u8()? as usize;
    if lat > 2 || lon > 2 {
        return Err(CoreError::Format("maneuver out of range".into()));
    }
    let maneuver = ManeuverClass::from_index(3 * lat + lon)?;
    let split_tag = *SplitTag::ALL
        .get(c.u8()? as usize)
        .ok_or_else(|| CoreError::Format("split tag out of range".into()))?;
    let n = c.len()?;
    let ego_history = (0..n).map(|_| c.point()).collect::<Result<_>>()?;
    let n = c.len()?;
    let ego_future = (0..n).map(|_| c.point()).collect::<Result<_>>()?;
    let n = c.len()?;
    let ego_lanes = (0..n)
        .map(|_| c.i64().map(|l| (l != NO_LANE).then_some(l)))
        .collect::<Result<_>>()?;
    let n = c.len()?;
    let mut neighbors = Vec::with_capacity(n);
    for _ in 0..n {
        let id = c.u64()?;
        let len = c.len()?;
        let history = (0..len)
            .map(|_| {
                let present = c.u8()? != 0;
                let p = c.point()?;
                Ok(present.then_some(p))
            })
            .collect::<Result<_>>()?;
        neighbors.push(Neighbor { id, history });
    }
    Ok(Scene {
        ego_id,
        ref_frame,
        ego_history,
        ego_future,
        neighbors,
        ego_lanes,
        maneuver,
        split_tag,
    })
}

/// `BATS`, u32 version, u64 count, then per scene a u64 byte length and the
/// little-endian payload.
pub fn write_scene_cache<W: Write>(mut out: W, scenes: &[Scene]) -> Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    out.write_all(&(scenes.len() as u64).to_le_bytes())?;
    for s in scenes {
        let payload = encode_scene(s);
        out.write_all(&(payload.len() as u64).to_le_bytes())?;
        out.write_all(&payload)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_scene_cache<R: Read>(mut input: R) -> Result<Vec<Scene>> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4).map_err(|_| CoreError::Format("not a scene cache".into()))? != CACHE_MAGIC {
        return Err(CoreError::Format("bad scene cache magic".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(CoreError::Format(format!(
            "scene cache version {version}, expected {CACHE_VERSION}"
        )));
    }
    let count = c.len()?;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.len()?;
        let payload = c.take(len)?;
        let mut inner = Cursor { data: payload, pos: 0 };
        scenes.push(decode_scene(&mut inner)?);
        if inner.pos != payload.len() {
            return Err(CoreError::Format("scene record length mismatch".into()));
        }
    }
    if c.pos != data.len() {
        return Err(CoreError::Format("trailing bytes after scene cache".into()));
    }
    Ok(scenes)
}

// ---------------------------------------------------------------- synthetic

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    ConstantVelocity,
    LaneChange,
    RoundaboutArc,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" => Ok(SynthKind::ConstantVelocity),
            "lane_change" => Ok(SynthKind::LaneChange),
            "roundabout_arc" => Ok(SynthKind::RoundaboutArc),
            _ => Err(CoreError::InvalidInput(format!("unknown synthetic kind `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ConstantVelocity => "constant_velocity",
            SynthKind::LaneChange => "lane_change",
            SynthKind::RoundaboutArc => "roundabout_arc",
        }
    }
}

/// Synthetic scene recipe.
///
/// `n_agents` counts the ego and applies to `constant_velocity` and
/// `roundabout_arc`; `lane_change` scenes have a fixed cast (ego, leader,
/// optional blocker, distractors).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_scenes: usize,
    pub n_agents: usize,
    /// Standard deviation of additive position noise, meters.
    pub noise: f64,
    pub seed: u64,
    pub t_h: f64,
    pub t_f: f64,
    pub dt: f64,
    pub capture_radius: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::LaneChange,
            n_scenes: 100,
            n_agents: 4,
            noise: 0.0,
            seed: 0,
            t_h: 3.0,
            t_f: 5.0,
            dt: DEFAULT_DT,
            capture_radius: 2.0 * 7.62,
        }
    }
}

/// Continuous-time agent path; `t = 0` is the reference instant.
type Path2 = Box<dyn Fn(f64) -> (CartPoint, Option<i64>)>;

fn lane_x(lane: i64) -> f64 {
    LANE_WIDTH * (lane - 2) as f64
}

/// Raised-cosine progress from 0 to 1 over `[t0, t0 + duration]`.
fn lateral_progress(t: f64, t0: f64, duration: f64) -> f64 {
    let u = ((t - t0) / duration).clamp(0.0, 1.0);
    0.5 * (1.0 - (PI * u).cos())
}

/// Straight path along +y in `lane`, optionally changing by `dir` lanes with
/// the given onset.
fn lane_path(lane: i64, y0: f64, v: f64, change: Option<(i64, f64)>) -> Path2 {
    const DURATION: f64 = 4.0;
    Box::new(move |t| {
        let y = y0 + v * t;
        match change {
            None => (CartPoint::new(lane_x(lane), y), Some(lane)),
            Some((dir, t0)) => {
                let s = lateral_progress(t, t0, DURATION);
                let x = lane_x(lane) + dir as f64 * LANE_WIDTH * s;
                let current = if t >= t0 + DURATION / 2.0 { lane + dir } else { lane };
                (CartPoint::new(x, y), Some(current))
            }
        }
    })
}

struct Template {
    ego: Path2,
    others: Vec<Path2>,
    label: ManeuverClass,
}

fn constant_velocity_template(rng: &mut ChaCha8Rng, n_agents: usize) -> Template {
    let lane = rng.random_range(1..=3);
    let v = rng.random_range(10.0..20.0);
    let others = (1..n_agents)
        .map(|_| {
            let l = rng.random_range(1..=3);
            let y0 = rng.random_range(-25.0..25.0);
            lane_path(l, y0, rng.random_range(10.0..20.0), None)
        })
        .collect();
    Template {
        ego: lane_path(lane, 0.0, v, None),
        others,
        label: ManeuverClass::new(Lateral::Keep, Longitudinal::Maintain),
    }
}

fn lane_change_template(rng: &mut ChaCha8Rng) -> Template {
    let v = rng.random_range(10.0..20.0);
    let keep = rng.random_range(0..3) == 0;
    let mut others = Vec::new();
    let (ego, lateral, lane) = if keep {
        let lane = rng.random_range(1..=3);
        // A distant leader at the same speed gives no reason to change lanes.
        others.push(lane_path(lane, rng.random_range(18.0..28.0), v, None));
        (lane_path(lane, 0.0, v, None), Lateral::Keep, lane)
    } else {
        // Changes start from the middle lane so a blocker always marks the
        // side not taken, and have begun by the reference frame.
        let left = rng.random_bool(0.5);
        let (dir, lane) = if left { (-1, 2) } else { (1, 2) };
        let t0 = rng.random_range(-1.0..0.0);
        // Slow leader ahead in the ego lane.
        others.push(lane_path(lane, rng.random_range(8.0..13.0), v - rng.random_range(1.0..2.5), None));
        // Blocker on the side the ego does not take.
        others.push(lane_path(lane - dir, rng.random_range(-5.0..5.0), v + rng.random_range(-0.5..0.5), None));
        let lateral = if left { Lateral::Left } else { Lateral::Right };
        (lane_path(lane, 0.0, v, Some((dir, t0))), lateral, lane)
    };
    for _ in 0..rng.random_range(1..=2) {
        let l = rng.random_range(1..=3);
        let dy = rng.random_range(18.0..28.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let dv = rng.random_range(-1.5..1.5);
        // Distractors drift toward a random lateral offset.
        let change = (l != lane && rng.random_bool(0.5)).then(|| ((lane - l).signum(), rng.random_range(-2.0..2.0)));
        let change = change.filter(|(d, _)| (1..=3).contains(&(l + d)));
        others.push(lane_path(l, dy, v + dv, change));
    }
    Template {
        ego,
        others,
        label: ManeuverClass::new(lateral, Longitudinal::Maintain),
    }
}

fn roundabout_template(rng: &mut ChaCha8Rng, n_agents: usize) -> Template {
    let radius = rng.random_range(15.0..25.0);
    let omega = rng.random_range(0.15..0.3);
    let ccw = rng.random_bool(0.5);
    let sign = if ccw { 1.0 } else { -1.0 };
    let center = CartPoint::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    let phase = rng.random_range(-PI..PI);
    let arc = move |offset: f64| -> Path2 {
        Box::new(move |t: f64| {
            let a = phase + offset + sign * omega * t;
            (CartPoint::new(center.x + radius * a.cos(), center.y + radius * a.sin()), None)
        })
    };
    let others = (1..n_agents)
        .map(|_| {
            let ahead = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let gap = rng.random_range(6.0..20.0) / radius;
            arc(sign * ahead * gap)
        })
        .collect();
    Template {
        ego: arc(0.0),
        others,
        label: ManeuverClass::new(if ccw { Lateral::Left } else { Lateral::Right }, Longitudinal::Maintain),
    }
}

/// Deterministic synthetic scenes. Labels come from the generating template.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Scene>> {
    if !(spec.dt > 0.0) || spec.noise < 0.0 || !spec.noise.is_finite() {
        return Err(CoreError::InvalidInput("synthetic spec needs dt > 0 and noise >= 0".into()));
    }
    let h = frames_of(spec.t_h, spec.dt);
    let f = frames_of(spec.t_f, spec.dt);
    if h < 1 || f < 1 {
        return Err(CoreError::InvalidInput("synthetic horizons shorter than one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for k in 0..spec.n_scenes {
        let template = match spec.kind {
            SynthKind::ConstantVelocity => constant_velocity_template(&mut rng, spec.n_agents.max(1)),
            SynthKind::LaneChange => lane_change_template(&mut rng),
            SynthKind::RoundaboutArc => roundabout_template(&mut rng, spec.n_agents.max(1)),
        };
        let times: Vec<f64> = (0..h + f).map(|i| (i as f64 - (h as f64 - 1.0)) * spec.dt).collect();
        let mut jitter = |p: CartPoint| -> CartPoint {
            if spec.noise == 0.0 {
                p
            } else {
                p.translated(noise.sample(&mut rng), noise.sample(&mut rng))
            }
        };
        let ego: Vec<(CartPoint, Option<i64>)> = times.iter().map(|&t| (template.ego)(t)).collect();
        let ego_points: Vec<CartPoint> = ego.iter().map(|e| jitter(e.0)).collect();
        let origin = ego_points[h - 1];
        let mut neighbors = Vec::new();
        for (j, path) in template.others.iter().enumerate() {
            let history: Vec<CartPoint> = times[..h].iter().map(|&t| jitter(path(t).0)).collect();
            if history[h - 1].distance(origin) <= spec.capture_radius {
                neighbors.push(Neighbor {
                    id: j as u64 + 2,
                    history: history.into_iter().map(Some).collect(),
                });
            }
        }
        let split_tag = SplitTag::from_lateral(template.label.lateral);
        scenes.push(Scene {
            ego_id: 1,
            ref_frame: k as i64,
            ego_history: ego_points[..h].to_vec(),
            ego_future: ego_points[h..].to_vec(),
            neighbors,
            ego_lanes: ego.iter().map(|e| e.1).collect(),
            maneuver: template.label,
            split_tag,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_csv(rows: &[(u64, i64, f64, f64)]) -> String {
        let mut s = String::from("vehicle_id,frame,x,y,lane_id\n");
        for r in rows {
            s.push_str(&format!("{},{},{},{},2\n", r.0, r.1, r.2, r.3));
        }
        s
    }

    fn straight_table(frames: i64, v: f64) -> TrackTable {
        let rows: Vec<_> = (0..frames).map(|f| (7, f, 0.0, v * 0.2 * f as f64)).collect();
        ingest_reader(table_csv(&rows).as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap()
    }

    #[test]
    fn feet_are_converted() {
        let csv = "vehicle_id,frame,x,y\n1,0,32.8084,0\n1,1,32.8084,3.28084\n";
        let cols = ColumnMap {
            lane: None,
            ..ColumnMap::default()
        };
        let t = ingest_reader(
            csv.as_bytes(),
            &cols,
            IngestOptions {
                unit: Unit::Feet,
                ..IngestOptions::default()
            },
        )
        .unwrap();
        assert!((t.rows[0].x - 10.0).abs() < 1e-4);
        assert!((t.rows[0].x - 32.8084 * 0.3048).abs() < 1e-15);
        assert!((t.rows[1].y - 1.0).abs() < 1e-4);
    }

    #[test]
    fn duplicate_rows_are_named() {
        let csv = "vehicle_id,frame,x,y,lane_id\n1,0,0,0,1\n1,1,0,1,1\n1,0,5,5,1\n";
        let err = ingest_reader(csv.as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap_err();
        match err {
            CoreError::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("vehicle 1 frame 0"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_and_malformed_inputs() {
        let cols = ColumnMap::default();
        let opts = IngestOptions::default();
        assert!(matches!(ingest_reader("".as_bytes(), &cols, opts), Err(CoreError::Empty(_))));
        assert!(matches!(
            ingest_reader("vehicle_id,frame,x,y,lane_id\n".as_bytes(), &cols, opts),
            Err(CoreError::Empty(_))
        ));
        assert!(matches!(
            ingest_reader("vehicle_id,frame,x\n1,0,0\n".as_bytes(), &cols, opts),
            Err(CoreError::MissingColumn(c)) if c == "y"
        ));
        let err = ingest_reader("vehicle_id,frame,x,y,lane_id\n1,0,0,0,1\n1,1,abc,0,1\n".as_bytes(), &cols, opts)
            .unwrap_err();
        assert!(matches!(err, CoreError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn stride_downsamples_and_gaps_split_segments() {
        let rows: Vec<_> = (0..10).filter(|f| *f != 6).map(|f| (3, f, 0.0, f as f64)).collect();
        let csv = table_csv(&rows);
        let t = ingest_reader(csv.as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap();
        let segs = t.segments();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].rows.len(), 6);
        let t2 = ingest_reader(
            csv.as_bytes(),
            &ColumnMap::default(),
            IngestOptions {
                dt: 0.1,
                stride: 2,
                ..IngestOptions::default()
            },
        )
        .unwrap();
        assert!((t2.dt - 0.2).abs() < 1e-15);
        assert_eq!(t2.rows.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
    }

    #[test]
    fn export_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<_> = (0..50)
            .map(|i| (i % 3, i as i64 / 3, rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)))
            .collect();
        let t = ingest_reader(table_csv(&rows).as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &ColumnMap::default(), IngestOptions::default()).unwrap();
        assert_eq!(back.rows.len(), t.rows.len());
        for (a, b) in back.rows.iter().zip(&t.rows) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            assert_eq!((a.vehicle_id, a.frame, a.lane), (b.vehicle_id, b.frame, b.lane));
        }
    }

    #[test]
    fn window_counts() {
        let one = window_scenes(&straight_table(40, 12.0), &WindowConfig::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].ego_history.len(), 15);
        assert_eq!(one[0].ego_future.len(), 25);
        assert!(one[0].neighbors.is_empty());
        // The reference frame is the last history frame, not the first future one.
        assert!((one[0].ego_future[0].y - one[0].ego_history[14].y - 12.0 * 0.2).abs() < 1e-9);
        assert!(window_scenes(&straight_table(39, 12.0), &WindowConfig::default()).unwrap().is_empty());
        let cfg = WindowConfig {
            t_h: 2.0,
            t_f: 4.0,
            ..WindowConfig::default()
        };
        let round = window_scenes(&straight_table(30, 8.0), &cfg).unwrap();
        assert_eq!(round.len(), 1);
        assert_eq!((round[0].ego_history.len(), round[0].ego_future.len()), (10, 20));
        let stride1 = WindowConfig {
            stride: 1,
            ..WindowConfig::default()
        };
        assert_eq!(window_scenes(&straight_table(45, 12.0), &stride1).unwrap().len(), 6);
    }

    #[test]
    fn windows_capture_nearby_neighbors() {
        let mut rows = Vec::new();
        for f in 0..40 {
            rows.push((1, f, 0.0, 2.0 * f as f64));
            rows.push((2, f, 3.5, 2.0 * f as f64 + 4.0));
            rows.push((3, f, 0.0, 2.0 * f as f64 + 100.0));
        }
        rows.retain(|r| !(r.0 == 2 && r.1 < 3));
        let t = ingest_reader(table_csv(&rows).as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap();
        let scenes = window_scenes(&t, &WindowConfig::default()).unwrap();
        let ego1 = scenes.iter().find(|s| s.ego_id == 1).unwrap();
        assert_eq!(ego1.neighbors.len(), 1);
        assert_eq!(ego1.neighbors[0].id, 2);
        assert!(ego1.neighbors[0].history[..3].iter().all(Option::is_none));
        assert!(ego1.neighbors[0].history[3..].iter().all(Option::is_some));
    }

    #[test]
    fn merge_lanes_set_tag() {
        let rows: Vec<_> = (0..40).map(|f| (7, f, 0.0, 2.0 * f as f64)).collect();
        let mut csv = String::from("vehicle_id,frame,x,y,lane_id\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{},{},7\n", r.0, r.1, r.2, r.3));
        }
        let t = ingest_reader(csv.as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap();
        let cfg = WindowConfig {
            merge_lanes: vec![7],
            ..WindowConfig::default()
        };
        assert_eq!(window_scenes(&t, &cfg).unwrap()[0].split_tag, SplitTag::Merge);
    }

    fn straight(n: usize, v: f64, dt: f64, y0: f64) -> Vec<CartPoint> {
        (0..n).map(|i| CartPoint::new(0.0, y0 + v * dt * i as f64)).collect()
    }

    #[test]
    fn labels() {
        let dt = 0.2;
        let hist = straight(15, 10.0, dt, -28.0);
        let fut = straight(25, 10.0, dt, 2.0);
        let m = label_maneuver(&hist, &fut, &[], dt).unwrap();
        assert_eq!(m, ManeuverClass::new(Lateral::Keep, Longitudinal::Maintain));
        let slow = straight(25, 5.0, dt, 1.0);
        assert_eq!(label_maneuver(&hist, &slow, &[], dt).unwrap().longitudinal, Longitudinal::Brake);
        let fast = straight(25, 15.0, dt, 3.0);
        assert_eq!(label_maneuver(&hist, &fast, &[], dt).unwrap().longitudinal, Longitudinal::Accelerate);
        let parked = vec![CartPoint::default(); 15];
        let moving = straight(25, 2.0, dt, 0.4);
        assert_eq!(label_maneuver(&parked, &moving, &[], dt).unwrap().longitudinal, Longitudinal::Accelerate);
        let mut lanes = vec![Some(3); 40];
        lanes[39] = Some(2);
        assert_eq!(label_maneuver(&hist, &fut, &lanes, dt).unwrap().lateral, Lateral::Left);
        lanes[39] = Some(4);
        assert_eq!(label_maneuver(&hist, &fut, &lanes, dt).unwrap().lateral, Lateral::Right);
        // Heading +y: moving toward -x is a left change.
        let drift: Vec<CartPoint> = fut.iter().map(|p| p.translated(-3.5, 0.0)).collect();
        assert_eq!(label_maneuver(&hist, &drift, &[], dt).unwrap().lateral, Lateral::Left);
    }

    fn spec(kind: SynthKind, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            kind,
            n_scenes: 60,
            noise,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn constant_velocity_future_is_linear() {
        for s in synth_generate(&spec(SynthKind::ConstantVelocity, 0.0, 3)).unwrap() {
            let h = &s.ego_history;
            let v = CartPoint::new(h[14].x - h[13].x, h[14].y - h[13].y);
            for (k, p) in s.ego_future.iter().enumerate() {
                let expected = h[14].translated(v.x * (k + 1) as f64, v.y * (k + 1) as f64);
                assert!(p.distance(expected) < 1e-9);
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in [SynthKind::ConstantVelocity, SynthKind::LaneChange, SynthKind::RoundaboutArc] {
            assert_eq!(synth_generate(&spec(kind, 0.1, 9)).unwrap(), synth_generate(&spec(kind, 0.1, 9)).unwrap());
            assert_ne!(synth_generate(&spec(kind, 0.1, 9)).unwrap(), synth_generate(&spec(kind, 0.1, 10)).unwrap());
        }
    }

    #[test]
    fn synth_templates_match_labeler() {
        for kind in [SynthKind::ConstantVelocity, SynthKind::LaneChange, SynthKind::RoundaboutArc] {
            let scenes = synth_generate(&SynthSpec {
                n_scenes: 300,
                ..spec(kind, 0.0, 5)
            })
            .unwrap();
            for s in &scenes {
                assert_eq!(label_scene(s, 0.2).unwrap(), s.maneuver, "{kind:?}");
            }
            if kind == SynthKind::LaneChange {
                for lat in Lateral::ALL {
                    assert!(scenes.iter().any(|s| s.maneuver.lateral == lat));
                }
            }
        }
    }

    #[test]
    fn roundabout_theta_changes_every_frame() {
        for s in synth_generate(&spec(SynthKind::RoundaboutArc, 0.0, 2)).unwrap() {
            // Bearing of consecutive displacement vectors turns at omega*dt.
            let pts: Vec<CartPoint> = s.ego_history.iter().chain(&s.ego_future).copied().collect();
            for w in pts.windows(3) {
                let a = (w[1].y - w[0].y).atan2(w[1].x - w[0].x);
                let b = (w[2].y - w[1].y).atan2(w[2].x - w[1].x);
                let turn = crate::geometry::wrap_angle(b - a).abs();
                assert!((0.15 * 0.2 - 1e-9..=0.3 * 0.2 + 1e-9).contains(&turn), "{turn}");
            }
            // And in the ego frame the future bearing moves every step.
            let frame = Frame::new(s.ego_history[14]);
            let thetas: Vec<f64> = s
                .ego_future
                .iter()
                .map(|&p| crate::geometry::cart_to_polar(p, &frame).theta)
                .collect();
            assert!(thetas.windows(2).all(|w| (w[1] - w[0]).abs() > 1e-6));
        }
    }

    #[test]
    fn scene_lengths_hold() {
        for kind in [SynthKind::ConstantVelocity, SynthKind::LaneChange, SynthKind::RoundaboutArc] {
            for s in synth_generate(&spec(kind, 0.1, 1)).unwrap() {
                assert_eq!(s.ego_history.len(), 15);
                assert_eq!(s.ego_future.len(), 25);
                assert_eq!(s.ego_lanes.len(), 40);
                for n in &s.neighbors {
                    assert_eq!(n.history.len(), 15);
                    assert!(n.history[14].unwrap().distance(s.ego_history[14]) <= 15.24);
                }
            }
        }
    }

    #[test]
    fn split_cases() {
        let scenes = synth_generate(&SynthSpec {
            n_scenes: 100,
            ..spec(SynthKind::LaneChange, 0.0, 4)
        })
        .unwrap();
        let s = split_dataset(&scenes, [0.7, 0.1, 0.2], SplitMode::Overall, 3, 1.0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        assert_eq!(s, split_dataset(&scenes, [0.7, 0.1, 0.2], SplitMode::Overall, 3, 1.0).unwrap());
        let q = split_dataset(&scenes, [0.7, 0.1, 0.2], SplitMode::Overall, 3, 0.25).unwrap();
        assert_eq!(q.train.len(), 18);
        assert_eq!(q.train[..], s.train[..18]);
        assert_eq!(q.test, s.test);
        let m = split_dataset(&scenes, [0.7, 0.1, 0.2], SplitMode::ManeuverBased, 3, 1.0).unwrap();
        assert_eq!(m.test_by_tag.values().map(Vec::len).sum::<usize>(), 20);
        assert!(split_dataset(&scenes, [0.7, 0.1, 0.1], SplitMode::Overall, 3, 1.0).is_err());
        assert!(matches!(
            split_dataset(&scenes[..2], [0.7, 0.1, 0.2], SplitMode::Overall, 3, 1.0),
            Err(CoreError::Empty(_))
        ));
    }

    #[test]
    fn cache_round_trips_and_rejects_corruption() {
        let mut scenes = synth_generate(&spec(SynthKind::LaneChange, 0.1, 8)).unwrap();
        scenes[0].neighbors.push(Neighbor {
            id: 99,
            history: vec![None; 15],
        });
        scenes[1].ego_lanes[3] = None;
        let mut buf = Vec::new();
        write_scene_cache(&mut buf, &scenes).unwrap();
        assert_eq!(read_scene_cache(buf.as_slice()).unwrap(), scenes);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_scene_cache(bad.as_slice()), Err(CoreError::Format(_))));
        let mut wrong_version = buf.clone();
        wrong_version[4] = 9;
        assert!(matches!(read_scene_cache(wrong_version.as_slice()), Err(CoreError::Format(m)) if m.contains("version")));
        assert!(read_scene_cache(&buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn windowed_scenes_satisfy_lengths(
            lengths in proptest::collection::vec(30usize..70, 1..4),
            gap in 0usize..40,
            t_h in 2usize..4,
        ) {
            let mut rows = Vec::new();
            for (v, &len) in lengths.iter().enumerate() {
                for f in 0..len {
                    if f != gap {
                        rows.push((v as u64, f as i64, v as f64 * 3.5, 2.0 * f as f64));
                    }
                }
            }
            let t = ingest_reader(table_csv(&rows).as_bytes(), &ColumnMap::default(), IngestOptions::default()).unwrap();
            let cfg = WindowConfig { t_h: t_h as f64, t_f: 4.0, stride: 3, ..WindowConfig::default() };
            let h = t_h * 5;
            for s in window_scenes(&t, &cfg).unwrap() {
                prop_assert_eq!(s.ego_history.len(), h);
                prop_assert_eq!(s.ego_future.len(), 20);
                prop_assert_eq!(s.ego_lanes.len(), h + 20);
                for n in &s.neighbors {
                    prop_assert_eq!(n.history.len(), h);
                    prop_assert!(n.history[h - 1].unwrap().distance(s.ego_history[h - 1]) <= cfg.capture_radius);
                }
            }
        }
    }
}
