//! Versioned text formats for scenes, reconstructions and reports.
//!
//! Every file starts with a `<kind> <version>` header line. Records are
//! whitespace-separated; blank lines and lines starting with `#` are ignored.
//! Floating-point values are written in shortest round-trip form so that
//! loading a saved file reproduces it exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adasfm_core::partition::{Partition, PartitionSet};
use adasfm_core::scene::{EdgeSource, Frame, KeypointSet, Observation, Reconstruction, SensorPrior, Track, TwoViewEdge, ViewGraph};
use adasfm_core::synth::{GroundTruth, MetricsReport};
use adasfm_core::{Camera, ImageId, Pose, Rotation};
use nalgebra::{Matrix3, Vector2, Vector3};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type IoResult<T> = Result<T, IoError>;

pub fn read_file(path: &Path) -> IoResult<String> {
    fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> IoResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Tokenized record with its line number.
struct Record<'a> {
    line: usize,
    tokens: Vec<&'a str>,
    next: usize,
}

struct Reader<'a> {
    path: &'a Path,
    records: std::vec::IntoIter<Record<'a>>,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, text: &'a str, kind: &str) -> IoResult<Self> {
        let mut records: Vec<Record<'a>> = text
            .lines()
            .enumerate()
            .filter_map(|(k, l)| {
                let l = l.trim();
                (!l.is_empty() && !l.starts_with('#')).then(|| Record {
                    line: k + 1,
                    tokens: l.split_whitespace().collect(),
                    next: 0,
                })
            })
            .collect();
        if records.is_empty() {
            return Err(parse_error(path, 1, format!("missing `{kind} {FORMAT_VERSION}` header")));
        }
        let header = records.remove(0);
        match header.tokens.as_slice() {
            [k, v] if *k == kind => {
                if v.parse::<u32>().ok() != Some(FORMAT_VERSION) {
                    return Err(parse_error(path, header.line, format!("unsupported {kind} version `{v}`")));
                }
            }
            _ => return Err(parse_error(path, header.line, format!("expected header `{kind} {FORMAT_VERSION}`"))),
        }
        Ok(Reader {
            path,
            records: records.into_iter(),
        })
    }

    fn next_record(&mut self) -> Option<Record<'a>> {
        self.records.next()
    }

    fn err(&self, rec: &Record, message: impl Into<String>) -> IoError {
        parse_error(self.path, rec.line, message.into())
    }

    fn value<T: FromStr>(&self, rec: &mut Record<'a>, what: &str) -> IoResult<T> {
        let tok = rec
            .tokens
            .get(rec.next)
            .copied()
            .ok_or_else(|| self.err(rec, format!("missing {what}")))?;
        rec.next += 1;
        tok.parse().map_err(|_| self.err(rec, format!("invalid {what} `{tok}`")))
    }

    fn finish(&self, rec: &Record) -> IoResult<()> {
        if rec.next != rec.tokens.len() {
            return Err(self.err(rec, format!("{} trailing values", rec.tokens.len() - rec.next)));
        }
        Ok(())
    }

    fn vector(&self, rec: &mut Record<'a>, what: &str) -> IoResult<Vector3<f64>> {
        Ok(Vector3::new(self.value(rec, what)?, self.value(rec, what)?, self.value(rec, what)?))
    }

    fn rotation(&self, rec: &mut Record<'a>) -> IoResult<Rotation> {
        let mut m = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                m[(r, c)] = self.value(rec, "rotation entry")?;
            }
        }
        let rot = Rotation::from_matrix_unchecked(m);
        if !(rot.orthonormality_error() < 1e-6) {
            return Err(self.err(rec, "rotation is not orthonormal"));
        }
        Ok(rot)
    }

    fn pose(&self, rec: &mut Record<'a>) -> IoResult<Pose> {
        let r = self.rotation(rec)?;
        let t = self.vector(rec, "translation")?;
        Ok(Pose::new(r, t))
    }
}

fn parse_error(path: &Path, line: usize, message: String) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn push_rotation(s: &mut String, r: &Rotation) {
    let m = r.matrix();
    for row in 0..3 {
        for col in 0..3 {
            let _ = write!(s, " {}", m[(row, col)]);
        }
    }
}

fn push_vector(s: &mut String, v: &Vector3<f64>) {
    let _ = write!(s, " {} {} {}", v.x, v.y, v.z);
}

fn push_pose(s: &mut String, p: &Pose) {
    push_rotation(s, &p.rotation);
    push_vector(s, &p.translation);
}

/// ```text
/// adasfm-viewgraph 1
/// image <id> <fx> <fy> <cx> <cy> <width> <height>
/// edge <i> <j> <visual|sensor> <R row-major x9> <t x3> <match count> <a b>...
/// ```
pub fn format_view_graph(graph: &ViewGraph) -> String {
    let mut s = format!("adasfm-viewgraph {FORMAT_VERSION}\n");
    for (id, c) in graph.cameras() {
        let _ = writeln!(s, "image {id} {} {} {} {} {} {}", c.fx, c.fy, c.cx, c.cy, c.width, c.height);
    }
    for e in graph.edges() {
        let _ = write!(s, "edge {} {} {}", e.i, e.j, e.source.as_str());
        push_rotation(&mut s, &e.rotation);
        push_vector(&mut s, &e.direction);
        let _ = write!(s, " {}", e.matches.len());
        for (a, b) in &e.matches {
            let _ = write!(s, " {a} {b}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_view_graph(path: &Path, text: &str) -> IoResult<ViewGraph> {
    let mut rd = Reader::new(path, text, "adasfm-viewgraph")?;
    let mut graph = ViewGraph::new();
    while let Some(mut rec) = rd.next_record() {
        match rec.tokens[0] {
            "image" => {
                rec.next = 1;
                let id: ImageId = rd.value(&mut rec, "image id")?;
                let camera = Camera::new(
                    rd.value(&mut rec, "fx")?,
                    rd.value(&mut rec, "fy")?,
                    rd.value(&mut rec, "cx")?,
                    rd.value(&mut rec, "cy")?,
                    rd.value(&mut rec, "width")?,
                    rd.value(&mut rec, "height")?,
                )
                .map_err(|e| rd.err(&rec, e.to_string()))?;
                rd.finish(&rec)?;
                graph.add_image(id, camera);
            }
            "edge" => {
                rec.next = 1;
                let i: ImageId = rd.value(&mut rec, "image id")?;
                let j: ImageId = rd.value(&mut rec, "image id")?;
                let source = match rd.value::<String>(&mut rec, "edge source")?.as_str() {
                    "visual" => EdgeSource::Visual,
                    "sensor" => EdgeSource::Sensor,
                    other => return Err(rd.err(&rec, format!("unknown edge source `{other}`"))),
                };
                let rotation = rd.rotation(&mut rec)?;
                let direction = rd.vector(&mut rec, "direction")?;
                let n: usize = rd.value(&mut rec, "match count")?;
                let mut matches = Vec::with_capacity(n);
                for _ in 0..n {
                    matches.push((rd.value(&mut rec, "keypoint index")?, rd.value(&mut rec, "keypoint index")?));
                }
                rd.finish(&rec)?;
                if i >= j {
                    return Err(rd.err(&rec, format!("edge ({i}, {j}) must satisfy i < j")));
                }
                if !((direction.norm() - 1.0).abs() < 1e-9) {
                    return Err(rd.err(&rec, "translation direction is not a unit vector"));
                }
                let edge = TwoViewEdge {
                    i,
                    j,
                    rotation,
                    direction,
                    matches,
                    source,
                };
                graph.insert_edge(edge).map_err(|e| rd.err(&rec, e.to_string()))?;
            }
            other => return Err(rd.err(&rec, format!("unknown record `{other}`"))),
        }
    }
    Ok(graph)
}

/// `image <id> <count> <x y>...`
pub fn format_keypoints(keypoints: &KeypointSet) -> String {
    let mut s = format!("adasfm-keypoints {FORMAT_VERSION}\n");
    for (id, pts) in keypoints.iter() {
        let _ = write!(s, "image {id} {}", pts.len());
        for p in pts {
            let _ = write!(s, " {} {}", p.x, p.y);
        }
        s.push('\n');
    }
    s
}

pub fn parse_keypoints(path: &Path, text: &str) -> IoResult<KeypointSet> {
    let mut rd = Reader::new(path, text, "adasfm-keypoints")?;
    let mut out = KeypointSet::new();
    while let Some(mut rec) = rd.next_record() {
        if rec.tokens[0] != "image" {
            return Err(rd.err(&rec, format!("unknown record `{}`", rec.tokens[0])));
        }
        rec.next = 1;
        let id: ImageId = rd.value(&mut rec, "image id")?;
        let n: usize = rd.value(&mut rec, "keypoint count")?;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            pts.push(Vector2::new(rd.value(&mut rec, "x")?, rd.value(&mut rec, "y")?));
        }
        rd.finish(&rec)?;
        out.insert(id, pts);
    }
    Ok(out)
}

/// `prior <i> <j> <dt_ms> <R x9> <t x3>`
pub fn format_priors(priors: &[SensorPrior]) -> String {
    let mut s = format!("adasfm-priors {FORMAT_VERSION}\n");
    for p in priors {
        let _ = write!(s, "prior {} {} {}", p.i, p.j, p.dt_ms);
        push_rotation(&mut s, &p.rotation);
        push_vector(&mut s, &p.translation);
        s.push('\n');
    }
    s
}

pub fn parse_priors(path: &Path, text: &str) -> IoResult<Vec<SensorPrior>> {
    let mut rd = Reader::new(path, text, "adasfm-priors")?;
    let mut out = Vec::new();
    while let Some(mut rec) = rd.next_record() {
        if rec.tokens[0] != "prior" {
            return Err(rd.err(&rec, format!("unknown record `{}`", rec.tokens[0])));
        }
        rec.next = 1;
        let prior = SensorPrior {
            i: rd.value(&mut rec, "image id")?,
            j: rd.value(&mut rec, "image id")?,
            dt_ms: rd.value(&mut rec, "dt")?,
            rotation: rd.rotation(&mut rec)?,
            translation: rd.vector(&mut rec, "translation")?,
        };
        rd.finish(&rec)?;
        prior.validate().map_err(|e| rd.err(&rec, e.to_string()))?;
        out.push(prior);
    }
    Ok(out)
}

/// ```text
/// pose <id> <R x9> <t x3>
/// point <x> <y> <z> <count> <image keypoint>...
/// outlier-edge <i> <j>
/// outlier-match <i> <j> <a> <b>
/// ```
pub fn format_truth(truth: &GroundTruth) -> String {
    let mut s = format!("adasfm-truth {FORMAT_VERSION}\n");
    for (id, p) in &truth.poses {
        let _ = write!(s, "pose {id}");
        push_pose(&mut s, p);
        s.push('\n');
    }
    for (x, obs) in truth.points.iter().zip(&truth.tracks) {
        let _ = write!(s, "point {} {} {} {}", x.x, x.y, x.z, obs.len());
        for (img, kp) in obs {
            let _ = write!(s, " {img} {kp}");
        }
        s.push('\n');
    }
    for (i, j) in &truth.outlier_edges {
        let _ = writeln!(s, "outlier-edge {i} {j}");
    }
    for (i, j, a, b) in &truth.outlier_matches {
        let _ = writeln!(s, "outlier-match {i} {j} {a} {b}");
    }
    s
}

pub fn parse_truth(path: &Path, text: &str) -> IoResult<GroundTruth> {
    let mut rd = Reader::new(path, text, "adasfm-truth")?;
    let mut truth = GroundTruth::default();
    while let Some(mut rec) = rd.next_record() {
        rec.next = 1;
        match rec.tokens[0] {
            "pose" => {
                let id: ImageId = rd.value(&mut rec, "image id")?;
                let pose = rd.pose(&mut rec)?;
                truth.poses.insert(id, pose);
            }
            "point" => {
                let x = rd.vector(&mut rec, "coordinate")?;
                let n: usize = rd.value(&mut rec, "observation count")?;
                let mut obs = Vec::with_capacity(n);
                for _ in 0..n {
                    obs.push((rd.value(&mut rec, "image id")?, rd.value(&mut rec, "keypoint index")?));
                }
                truth.points.push(x);
                truth.tracks.push(obs);
            }
            "outlier-edge" => {
                truth.outlier_edges.insert((rd.value(&mut rec, "image id")?, rd.value(&mut rec, "image id")?));
            }
            "outlier-match" => {
                truth.outlier_matches.insert((
                    rd.value(&mut rec, "image id")?,
                    rd.value(&mut rec, "image id")?,
                    rd.value(&mut rec, "keypoint index")?,
                    rd.value(&mut rec, "keypoint index")?,
                ));
            }
            other => return Err(rd.err(&rec, format!("unknown record `{other}`"))),
        }
        rd.finish(&rec)?;
    }
    Ok(truth)
}

/// ```text
/// frame <global | partition k>
/// pose <id> <R x9> <t x3>
/// track <x> <y> <z> <count> <image keypoint inlier(0|1)>...
/// ```
pub fn format_reconstruction(recon: &Reconstruction) -> String {
    let mut s = format!("adasfm-reconstruction {FORMAT_VERSION}\n");
    match recon.frame {
        Frame::Global => s.push_str("frame global\n"),
        Frame::Partition(k) => {
            let _ = writeln!(s, "frame partition {k}");
        }
    }
    for (id, p) in &recon.poses {
        let _ = write!(s, "pose {id}");
        push_pose(&mut s, p);
        s.push('\n');
    }
    for t in &recon.tracks {
        let _ = write!(s, "track {} {} {} {}", t.point.x, t.point.y, t.point.z, t.observations.len());
        for o in &t.observations {
            let _ = write!(s, " {} {} {}", o.image, o.keypoint, u8::from(o.inlier));
        }
        s.push('\n');
    }
    s
}

pub fn parse_reconstruction(path: &Path, text: &str) -> IoResult<Reconstruction> {
    let mut rd = Reader::new(path, text, "adasfm-reconstruction")?;
    let mut recon = Reconstruction::new(Frame::Global);
    while let Some(mut rec) = rd.next_record() {
        rec.next = 1;
        match rec.tokens[0] {
            "frame" => {
                recon.frame = match rd.value::<String>(&mut rec, "frame")?.as_str() {
                    "global" => Frame::Global,
                    "partition" => Frame::Partition(rd.value(&mut rec, "partition index")?),
                    other => return Err(rd.err(&rec, format!("unknown frame `{other}`"))),
                };
            }
            "pose" => {
                let id: ImageId = rd.value(&mut rec, "image id")?;
                let pose = rd.pose(&mut rec)?;
                recon.poses.insert(id, pose);
            }
            "track" => {
                let point = rd.vector(&mut rec, "coordinate")?;
                let n: usize = rd.value(&mut rec, "observation count")?;
                let mut observations = Vec::with_capacity(n);
                for _ in 0..n {
                    let image = rd.value(&mut rec, "image id")?;
                    let keypoint = rd.value(&mut rec, "keypoint index")?;
                    let inlier = match rd.value::<u8>(&mut rec, "inlier flag")? {
                        0 => false,
                        1 => true,
                        v => return Err(rd.err(&rec, format!("inlier flag must be 0 or 1, got {v}"))),
                    };
                    observations.push(Observation { image, keypoint, inlier });
                }
                recon.tracks.push(Track { point, observations });
            }
            other => return Err(rd.err(&rec, format!("unknown record `{other}`"))),
        }
        rd.finish(&rec)?;
    }
    Ok(recon)
}

/// ```text
/// total-nodes <n>
/// cut-weight <w>
/// ratios <r>...
/// partition <k> <node count> <id layer>... <edge count> <i j>...
/// separators <layer> <partition> <count> <id>...
/// ```
pub fn format_partitions(set: &PartitionSet) -> String {
    let mut s = format!("adasfm-partitions {FORMAT_VERSION}\n");
    let _ = writeln!(s, "total-nodes {}", set.total_nodes);
    let _ = writeln!(s, "cut-weight {}", set.cut_weight);
    s.push_str("ratios");
    for r in &set.ratios {
        let _ = write!(s, " {r}");
    }
    s.push('\n');
    for (k, p) in set.partitions.iter().enumerate() {
        let _ = write!(s, "partition {k} {}", p.nodes.len());
        for (id, layer) in &p.nodes {
            let _ = write!(s, " {id} {layer}");
        }
        let _ = write!(s, " {}", p.edges.len());
        for (i, j) in &p.edges {
            let _ = write!(s, " {i} {j}");
        }
        s.push('\n');
    }
    for (l, layer) in set.separators.iter().enumerate() {
        for (k, seps) in layer.iter().enumerate() {
            let _ = write!(s, "separators {l} {k} {}", seps.len());
            for id in seps {
                let _ = write!(s, " {id}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn parse_partitions(path: &Path, text: &str) -> IoResult<PartitionSet> {
    let mut rd = Reader::new(path, text, "adasfm-partitions")?;
    let mut set = PartitionSet {
        partitions: Vec::new(),
        separators: Vec::new(),
        ratios: Vec::new(),
        cut_weight: 0.0,
        total_nodes: 0,
    };
    while let Some(mut rec) = rd.next_record() {
        rec.next = 1;
        match rec.tokens[0] {
            "total-nodes" => set.total_nodes = rd.value(&mut rec, "node count")?,
            "cut-weight" => set.cut_weight = rd.value(&mut rec, "cut weight")?,
            "ratios" => {
                while rec.next < rec.tokens.len() {
                    set.ratios.push(rd.value(&mut rec, "ratio")?);
                }
            }
            "partition" => {
                let k: usize = rd.value(&mut rec, "partition index")?;
                if k != set.partitions.len() {
                    return Err(rd.err(&rec, format!("partition {k} out of order")));
                }
                let mut p = Partition::default();
                let n: usize = rd.value(&mut rec, "node count")?;
                for _ in 0..n {
                    p.nodes.insert(rd.value(&mut rec, "image id")?, rd.value(&mut rec, "layer")?);
                }
                let m: usize = rd.value(&mut rec, "edge count")?;
                for _ in 0..m {
                    p.edges.insert((rd.value(&mut rec, "image id")?, rd.value(&mut rec, "image id")?));
                }
                set.partitions.push(p);
            }
            "separators" => {
                let l: usize = rd.value(&mut rec, "layer")?;
                let k: usize = rd.value(&mut rec, "partition index")?;
                let n: usize = rd.value(&mut rec, "separator count")?;
                let mut ids = BTreeSet::new();
                for _ in 0..n {
                    ids.insert(rd.value(&mut rec, "image id")?);
                }
                while set.separators.len() <= l {
                    set.separators.push(Vec::new());
                }
                let layer = &mut set.separators[l];
                if k != layer.len() {
                    return Err(rd.err(&rec, format!("separators of partition {k} out of order")));
                }
                layer.push(ids);
            }
            other => return Err(rd.err(&rec, format!("unknown record `{other}`"))),
        }
        rd.finish(&rec)?;
    }
    Ok(set)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct PoseRow {
    image_id: ImageId,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

/// `image_id,qw,qx,qy,qz,tx,ty,tz` with a header row.
pub fn format_poses_csv(poses: &BTreeMap<ImageId, Pose>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (id, p) in poses {
        let [qw, qx, qy, qz] = p.rotation.to_quaternion();
        let t = p.translation;
        w.serialize(PoseRow {
            image_id: *id,
            qw,
            qx,
            qy,
            qz,
            tx: t.x,
            ty: t.y,
            tz: t.z,
        })
        .expect("writing to memory");
    }
    if poses.is_empty() {
        w.write_record(["image_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
}

pub fn parse_poses_csv(path: &Path, text: &str) -> IoResult<BTreeMap<ImageId, Pose>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = BTreeMap::new();
    for row in r.deserialize() {
        let row: PoseRow = row.map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let rotation = Rotation::from_quaternion(row.qw, row.qx, row.qy, row.qz);
        out.insert(row.image_id, Pose::new(rotation, Vector3::new(row.tx, row.ty, row.tz)));
    }
    Ok(out)
}

/// ASCII PLY with one vertex per track.
pub fn format_points_ply(recon: &Reconstruction) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\ncomment adasfm points");
    let _ = writeln!(s, "element vertex {}", recon.tracks.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for t in &recon.tracks {
        let _ = writeln!(s, "{} {} {}", t.point.x, t.point.y, t.point.z);
    }
    s
}

pub fn parse_points_ply(path: &Path, text: &str) -> IoResult<Vec<Vector3<f64>>> {
    let mut lines = text.lines().enumerate();
    let mut count = None;
    let mut ended = false;
    for (k, line) in lines.by_ref() {
        let line = line.trim();
        if k == 0 && line != "ply" {
            return Err(parse_error(path, 1, "missing `ply` magic".into()));
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.parse::<usize>().map_err(|_| parse_error(path, k + 1, format!("invalid vertex count `{n}`")))?);
        }
        if line == "end_header" {
            ended = true;
            break;
        }
    }
    let (Some(n), true) = (count, ended) else {
        return Err(parse_error(path, 1, "incomplete PLY header".into()));
    };
    let mut out = Vec::with_capacity(n);
    for (k, line) in lines.take(n) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| parse_error(path, k + 1, "invalid vertex".into()))?;
        if v.len() != 3 {
            return Err(parse_error(path, k + 1, format!("expected 3 coordinates, got {}", v.len())));
        }
        out.push(Vector3::new(v[0], v[1], v[2]));
    }
    if out.len() != n {
        return Err(parse_error(path, text.lines().count(), format!("expected {n} vertices, found {}", out.len())));
    }
    Ok(out)
}

pub fn parse_metrics(path: &Path, text: &str) -> IoResult<MetricsReport> {
    let mut m = MetricsReport::default();
    for (k, line) in text.lines().enumerate() {
        let err = |msg: String| parse_error(path, k + 1, msg);
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(format!("expected key=value, got `{line}`")));
        };
        let float = |v: &str| v.parse::<f64>().map_err(|_| err(format!("invalid number `{v}` for {key}")));
        let optional = |v: &str| if v == "undefined" { Ok(None) } else { float(v).map(Some) };
        let count = |v: &str| v.parse::<usize>().map_err(|_| err(format!("invalid count `{v}` for {key}")));
        match key {
            "num_images" => m.num_images = count(value)?,
            "num_registered" => m.num_registered = count(value)?,
            "num_points" => m.num_points = count(value)?,
            "mean_track_length" => m.mean_track_length = float(value)?,
            "rmse_px" => m.rmse_px = optional(value)?,
            "ate" => m.ate = optional(value)?,
            "trajectory_diameter" => m.trajectory_diameter = float(value)?,
            _ => match key.strip_prefix("seconds.") {
                Some(stage) => m.stage_seconds.push((stage.to_string(), float(value)?)),
                None => return Err(err(format!("unknown key `{key}`"))),
            },
        }
    }
    Ok(m)
}

pub fn load<T>(path: &Path, parse: impl Fn(&Path, &str) -> IoResult<T>) -> IoResult<T> {
    let text = read_file(path)?;
    parse(path, &text)
}
