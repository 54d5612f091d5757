//! Classical appearance stage: render synthetic grayscale eye frames from
//! ground truth, then detect pupil and glints via histogram thresholding,
//! connected components, ellipse fitting, and back-projection-scored glint
//! labeling.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::cornea::{led_loss_at, LiftConfig};
use crate::ellipse::{fit_ellipse, Ellipse, EllipseError};
use crate::geometry::{self, PinholeCamera, Point2, Point3, UnitVec3};
use crate::sim::{
    solve_glint_reflection, EyeState, FrameObservation, GlintObs, Keypoint, LedRig, SubjectParams,
};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum RasterError {
    /// No dark component of sufficient area.
    PupilNotFound,
    /// Fewer than two candidate glint blobs.
    InsufficientGlints { got: usize },
    EllipseFit(EllipseError),
    /// Malformed PGM input.
    Pgm(String),
}

impl std::fmt::Display for RasterError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::PupilNotFound => write!(f, "no pupil component found"),
            Self::InsufficientGlints { got } => {
                write!(f, "need at least 2 candidate blobs, got {got}")
            }
            Self::EllipseFit(e) => write!(f, "{e}"),
            Self::Pgm(msg) => write!(f, "PGM: {msg}"),
        }
    }
}

impl std::error::Error for RasterError {}

impl From<EllipseError> for RasterError {
    fn from(e: EllipseError) -> Self {
        Self::EllipseFit(e)
    }
}

pub type RasterResult<T> = Result<T, RasterError>;

// ── Image type and PGM IO ───────────────────────────────────────────────

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self { width, height, data: vec![value; (width * height) as usize] }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: u8) {
        self.data[(y * self.width + x) as usize] = value;
    }

    /// Binary PGM (P5), bit-exact.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn read_pgm<R: Read>(mut r: R) -> RasterResult<GrayImage> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| RasterError::Pgm(e.to_string()))?;
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> RasterResult<String> {
            // Skip whitespace and '#' comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::Pgm("unexpected end of header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token(&bytes)? != "P5" {
            return Err(RasterError::Pgm("not a binary PGM (P5) file".into()));
        }
        let width: u32 =
            token(&bytes)?.parse().map_err(|_| RasterError::Pgm("bad width".into()))?;
        let height: u32 =
            token(&bytes)?.parse().map_err(|_| RasterError::Pgm("bad height".into()))?;
        let maxval: u32 =
            token(&bytes)?.parse().map_err(|_| RasterError::Pgm("bad maxval".into()))?;
        if maxval != 255 {
            return Err(RasterError::Pgm(format!("unsupported maxval {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let expected = (width * height) as usize;
        if bytes.len() < pos + expected {
            return Err(RasterError::Pgm("truncated pixel data".into()));
        }
        Ok(GrayImage { width, height, data: bytes[pos..pos + expected].to_vec() })
    }

    pub fn read_pgm_buffered<R: BufRead>(r: R) -> RasterResult<GrayImage> {
        Self::read_pgm(r)
    }
}

/// Binary mask with the same layout as the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl BinaryMask {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

// ── Rendering ───────────────────────────────────────────────────────────

/// Gray levels and glint profile of the synthetic renderer. The renderer
/// is deterministic: same inputs, bit-identical frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub background_level: u8,
    pub sclera_level: u8,
    pub iris_level: u8,
    pub pupil_level: u8,
    /// Gaussian sigma of a rendered glint spot, px.
    pub glint_sigma: f64,
    pub glint_peak: u8,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background_level: 90,
            sclera_level: 120,
            iris_level: 60,
            pupil_level: 5,
            glint_sigma: 1.2,
            glint_peak: 255,
        }
    }
}

fn paint_ellipse(img: &mut GrayImage, e: &geometry::ImageEllipse, value: u8) {
    let (u0, v0, u1, v1) = e.bounds();
    let x0 = u0.floor().max(0.0) as u32;
    let y0 = v0.floor().max(0.0) as u32;
    let x1 = (u1.ceil().min(img.width as f64 - 1.0)).max(0.0) as u32;
    let y1 = (v1.ceil().min(img.height as f64 - 1.0)).max(0.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if e.contains(&Point2::new(x as f64 + 0.0, y as f64 + 0.0)) {
                img.set(x, y, value);
            }
        }
    }
}

fn paint_spot(img: &mut GrayImage, center: Point2, sigma: f64, peak: u8) {
    let radius = (4.0 * sigma).ceil();
    let x0 = (center.u - radius).floor().max(0.0) as u32;
    let y0 = (center.v - radius).floor().max(0.0) as u32;
    let x1 = (center.u + radius).ceil().min(img.width as f64 - 1.0).max(0.0) as u32;
    let y1 = (center.v + radius).ceil().min(img.height as f64 - 1.0).max(0.0) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let du = x as f64 - center.u;
            let dv = y as f64 - center.v;
            let value = (peak as f64 * (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp())
                .round() as u8;
            if value > img.get(x, y) {
                img.set(x, y, value);
            }
        }
    }
}

/// Renders a synthetic IR eye frame: mid-gray face, brighter sclera disc,
/// darker iris disc, near-black pupil ellipse, and Gaussian glint spots at
/// the true reflection projections. `extra_spots` renders unlabeled
/// distractors the same way.
pub fn render_frame(
    eye: &EyeState,
    subject: &SubjectParams,
    rig: &LedRig,
    camera: &PinholeCamera,
    config: &RenderConfig,
    extra_spots: &[Point2],
) -> GrayImage {
    let mut img = GrayImage::filled(camera.width, camera.height, config.background_level);

    let view = UnitVec3::new(eye.eyeball_center.to_vec())
        .unwrap_or_else(|_| eye.optical_axis.flipped());
    if let Ok(sclera) = geometry::project_disc_affine(
        camera,
        eye.eyeball_center,
        view,
        subject.eyeball_radius,
    ) {
        paint_ellipse(&mut img, &sclera, config.sclera_level);
    }
    if let Ok(iris) = geometry::project_disc_affine(
        camera,
        eye.pupil_center_3d,
        eye.optical_axis,
        subject.iris_radius,
    ) {
        paint_ellipse(&mut img, &iris, config.iris_level);
    }
    if let Ok(pupil) = geometry::project_disc_affine(
        camera,
        eye.pupil_center_3d,
        eye.optical_axis,
        subject.pupil_radius,
    ) {
        paint_ellipse(&mut img, &pupil, config.pupil_level);
    }

    for led in rig.leds.iter() {
        if let Ok(Some(g3)) = solve_glint_reflection(*led, &eye.cornea, Point3::ORIGIN) {
            if let Ok(g2) = geometry::project(camera, g3) {
                if camera.contains(&g2) {
                    paint_spot(&mut img, g2, config.glint_sigma, config.glint_peak);
                }
            }
        }
    }
    for spot in extra_spots {
        if camera.contains(spot) {
            paint_spot(&mut img, *spot, config.glint_sigma, config.glint_peak);
        }
    }
    img
}

// ── Adaptive thresholding ───────────────────────────────────────────────

/// Bright-tail threshold from the image histogram: the smallest intensity
/// T such that pixels strictly above T cover at most `bright_fraction` of
/// the image. Returns the mask of candidate glint pixels and T.
pub fn adaptive_threshold(img: &GrayImage, bright_fraction: f64) -> (BinaryMask, u8) {
    let mut histogram = [0u64; 256];
    for &v in &img.data {
        histogram[v as usize] += 1;
    }
    let budget = (bright_fraction * img.data.len() as f64).floor() as u64;
    let mut above = 0u64;
    let mut threshold = 255u8;
    // Walk down from the top; stop before the tail exceeds the budget.
    for t in (0..255usize).rev() {
        if above + histogram[t + 1] > budget {
            threshold = (t + 1) as u8;
            break;
        }
        above += histogram[t + 1];
        threshold = t as u8;
        if t == 0 {
            break;
        }
    }
    let data = img.data.iter().map(|&v| v > threshold).collect();
    (BinaryMask { width: img.width, height: img.height, data }, threshold)
}

/// Dark-side threshold: the largest T such that pixels strictly below T
/// cover at most `dark_fraction` of the image.
fn dark_threshold(img: &GrayImage, dark_fraction: f64) -> u8 {
    let mut histogram = [0u64; 256];
    for &v in &img.data {
        histogram[v as usize] += 1;
    }
    let budget = (dark_fraction * img.data.len() as f64).floor() as u64;
    let mut below = 0u64;
    let mut threshold = 0u8;
    for t in 0..=255usize {
        if below > budget {
            break;
        }
        threshold = t as u8;
        below += histogram[t];
    }
    threshold
}

// ── Connected components and blobs ──────────────────────────────────────

/// A 4-connected bright component with moment statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(u32, u32)>,
    /// Intensity-weighted centroid (weights are intensity above threshold).
    pub centroid: Point2,
    /// Moment-equivalent ellipse (present when the blob has 2D extent).
    pub ellipse: Option<Ellipse>,
    pub mean_intensity: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub min_area: usize,
    pub max_area: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { min_area: 2, max_area: 100 }
    }
}

/// 4-connected components of a mask. Returns (label map, component count);
/// labels start at 1, 0 is background.
fn connected_components(mask: &BinaryMask) -> (Vec<u32>, u32) {
    let w = mask.width as usize;
    let h = mask.height as usize;
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            let x = idx % w;
            let y = idx / w;
            let mut visit = |nx: usize, ny: usize| {
                let nidx = ny * w + nx;
                if mask.data[nidx] && labels[nidx] == 0 {
                    labels[nidx] = next;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
    }
    (labels, next)
}

/// Extracts blobs from a bright mask: 4-connected components within the
/// area bounds, each with an intensity-weighted centroid and moment-based
/// ellipse. `threshold` is the value subtracted before weighting.
pub fn extract_blobs(
    mask: &BinaryMask,
    img: &GrayImage,
    threshold: u8,
    config: &BlobConfig,
) -> Vec<Blob> {
    let (labels, count) = connected_components(mask);
    let mut groups: Vec<Vec<(u32, u32)>> = vec![Vec::new(); count as usize];
    for y in 0..mask.height {
        for x in 0..mask.width {
            let label = labels[(y * mask.width + x) as usize];
            if label > 0 {
                groups[(label - 1) as usize].push((x, y));
            }
        }
    }
    let mut blobs = Vec::new();
    for pixels in groups {
        if pixels.len() < config.min_area || pixels.len() > config.max_area {
            continue;
        }
        let mut w_sum = 0.0;
        let mut cu = 0.0;
        let mut cv = 0.0;
        let mut intensity_sum = 0.0;
        for &(x, y) in &pixels {
            let value = img.get(x, y) as f64;
            let weight = value - threshold as f64;
            w_sum += weight;
            cu += weight * x as f64;
            cv += weight * y as f64;
            intensity_sum += value;
        }
        if w_sum <= 0.0 {
            continue;
        }
        cu /= w_sum;
        cv /= w_sum;
        // Weighted second moments -> Gaussian-equivalent ellipse.
        let mut muu = 0.0;
        let mut mvv = 0.0;
        let mut muv = 0.0;
        for &(x, y) in &pixels {
            let weight = img.get(x, y) as f64 - threshold as f64;
            let du = x as f64 - cu;
            let dv = y as f64 - cv;
            muu += weight * du * du;
            mvv += weight * dv * dv;
            muv += weight * du * dv;
        }
        muu /= w_sum;
        mvv /= w_sum;
        muv /= w_sum;
        let half_trace = (muu + mvv) / 2.0;
        let gap = ((muu - mvv) * (muu - mvv) / 4.0 + muv * muv).sqrt();
        let l_major = half_trace + gap;
        let l_minor = (half_trace - gap).max(0.0);
        let ellipse = if l_minor > 1e-12 {
            Some(Ellipse {
                center: Point2::new(cu, cv),
                semi_major: 2.0 * l_major.sqrt(),
                semi_minor: 2.0 * l_minor.sqrt(),
                angle: 0.5 * (2.0 * muv).atan2(muu - mvv),
            })
        } else {
            None
        };
        blobs.push(Blob {
            centroid: Point2::new(cu, cv),
            ellipse,
            mean_intensity: intensity_sum / pixels.len() as f64,
            area: pixels.len(),
            pixels,
        });
    }
    // Deterministic order: by raster position of the first pixel.
    blobs.sort_by_key(|b| b.pixels[0].1 * mask.width + b.pixels[0].0);
    blobs
}

// ── Pupil fitting ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PupilConfig {
    /// Histogram fraction for the dark-side threshold.
    pub dark_fraction: f64,
    pub min_area: usize,
    /// Boundary points within this Chebyshev distance of a bright pixel
    /// (a glint bite) are excluded from the fit.
    pub glint_exclusion_radius: u32,
    /// Intensity treated as "bright" for the exclusion test.
    pub bright_level: u8,
}

impl Default for PupilConfig {
    fn default() -> Self {
        Self { dark_fraction: 0.03, min_area: 50, glint_exclusion_radius: 3, bright_level: 200 }
    }
}

/// Segments the darkest region, extracts its outer boundary, and fits a
/// direct least-squares ellipse. Boundary points bitten by glint spots are
/// excluded; hole boundaries (glints inside the pupil) never enter.
pub fn fit_pupil_ellipse(
    img: &GrayImage,
    config: &PupilConfig,
) -> RasterResult<(Point2, Ellipse)> {
    let threshold = dark_threshold(img, config.dark_fraction);
    let data: Vec<bool> = img.data.iter().map(|&v| v < threshold).collect();
    let mask = BinaryMask { width: img.width, height: img.height, data };
    let (labels, count) = connected_components(&mask);
    if count == 0 {
        return Err(RasterError::PupilNotFound);
    }
    // Largest dark component.
    let mut sizes = vec![0usize; count as usize];
    for &label in &labels {
        if label > 0 {
            sizes[(label - 1) as usize] += 1;
        }
    }
    let (best_idx, &best_size) =
        sizes.iter().enumerate().max_by_key(|(_, &s)| s).expect("count > 0");
    if best_size < config.min_area {
        return Err(RasterError::PupilNotFound);
    }
    let target = best_idx as u32 + 1;

    // Exterior = non-component pixels reachable from the border; boundary
    // pixels adjacent to holes are not exterior-adjacent.
    let w = img.width as usize;
    let h = img.height as usize;
    let mut exterior = vec![false; w * h];
    let mut queue = std::collections::VecDeque::new();
    let push = |idx: usize, exterior: &mut Vec<bool>, queue: &mut std::collections::VecDeque<usize>| {
        if !exterior[idx] && labels[idx] != target {
            exterior[idx] = true;
            queue.push_back(idx);
        }
    };
    for x in 0..w {
        push(x, &mut exterior, &mut queue);
        push((h - 1) * w + x, &mut exterior, &mut queue);
    }
    for y in 0..h {
        push(y * w, &mut exterior, &mut queue);
        push(y * w + w - 1, &mut exterior, &mut queue);
    }
    while let Some(idx) = queue.pop_front() {
        let x = idx % w;
        let y = idx / w;
        if x > 0 {
            push(idx - 1, &mut exterior, &mut queue);
        }
        if x + 1 < w {
            push(idx + 1, &mut exterior, &mut queue);
        }
        if y > 0 {
            push(idx - w, &mut exterior, &mut queue);
        }
        if y + 1 < h {
            push(idx + w, &mut exterior, &mut queue);
        }
    }

    let r = config.glint_exclusion_radius as i64;
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            if labels[idx] != target {
                continue;
            }
            let on_outer_boundary = (x > 0 && exterior[idx - 1])
                || (x + 1 < w && exterior[idx + 1])
                || (y > 0 && exterior[idx - w])
                || (y + 1 < h && exterior[idx + w])
                || x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h;
            if !on_outer_boundary {
                continue;
            }
            // Skip points bitten by a glint spot.
            let mut near_bright = false;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if img.get(nx as u32, ny as u32) >= config.bright_level {
                        near_bright = true;
                        break 'scan;
                    }
                }
            }
            if !near_bright {
                boundary.push(Point2::new(x as f64, y as f64));
            }
        }
    }
    let ellipse = fit_ellipse(&boundary)?;
    Ok((ellipse.center, ellipse))
}

// ── Glint labeling ──────────────────────────────────────────────────────

/// Partial injective assignment of candidate blobs to the four LEDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlintLabeling {
    /// Per LED: index into the candidate list, or None (absent).
    pub assignment: [Option<usize>; 4],
    /// Per-glint RMS back-projection distance of the winning hypothesis, mm.
    pub score_mm: f64,
}

impl GlintLabeling {
    pub fn assigned_count(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    /// Most candidates considered (brightest-first beyond this).
    pub max_candidates: usize,
    /// Gate on the per-glint RMS back-projection distance for a hypothesis
    /// to count as consistent, mm.
    pub gate_mm: f64,
    pub lift: LiftConfig,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            max_candidates: 8,
            gate_mm: 1.5,
            // Hypothesis scoring uses the validated coarse-to-fine search.
            lift: LiftConfig { coarse_to_fine: true, ..LiftConfig::default() },
        }
    }
}

/// Back-projection score of one hypothesis: solve the cornea ray, lift it,
/// then polish the depth continuously inside the winning grid cell and
/// report the per-glint RMS distance of reflected rays to their LEDs.
/// None when the geometry is infeasible.
fn hypothesis_score(
    pairs: &[(Point2, Point3)],
    camera: &PinholeCamera,
    lift: &LiftConfig,
) -> Option<f64> {
    let normals: Vec<_> = pairs
        .iter()
        .map(|(g, l)| {
            geometry::back_project(camera, *g).as_vec().cross(&l.to_vec().normalize())
        })
        .collect();
    let direction = geometry::solve_null_ray(&normals).ok()?;
    if direction.z() <= 0.0 {
        return None;
    }
    let cornea_2d = geometry::project(
        camera,
        Point3::new(direction.x() / direction.z(), direction.y() / direction.z(), 1.0),
    )
    .ok()?;
    let (center, grid_loss) =
        crate::cornea::lift_cornea_to_3d(cornea_2d, pairs, camera, lift).ok()?;

    // Golden-section polish of z within one grid cell: the grid floor
    // (~half a step in z) would otherwise dominate near-perfect hypotheses.
    let c_dir = geometry::back_project(camera, cornea_2d);
    let glint_dirs: Vec<UnitVec3> =
        pairs.iter().map(|(g, _)| geometry::back_project(camera, *g)).collect();
    let leds: Vec<Point3> = pairs.iter().map(|(_, l)| *l).collect();
    let eval = |z: f64| {
        let scale = z / c_dir.z();
        led_loss_at(
            Point3::new(c_dir.x() * scale, c_dir.y() * scale, z),
            &glint_dirs,
            &leds,
            lift,
        )
        .unwrap_or(f64::INFINITY)
    };
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut lo = center.z - lift.z_step;
    let mut hi = center.z + lift.z_step;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    for _ in 0..70 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = eval(x2);
        }
    }
    let loss = f1.min(f2).min(grid_loss);
    Some((2.0 * loss / pairs.len() as f64).sqrt())
}

/// Labels candidate blob centers against the LED rig by exhaustive
/// enumeration of injective assignments (two or more LEDs), scoring each
/// hypothesis with the cornea back-projection loss. Consistent hypotheses
/// (RMS within the gate) are preferred by assigned count, then score; with
/// no consistent hypothesis the global minimum wins.
pub fn label_glints(
    candidates: &[Point2],
    rig: &LedRig,
    camera: &PinholeCamera,
    config: &LabelingConfig,
) -> RasterResult<GlintLabeling> {
    let n = candidates.len().min(config.max_candidates);
    if n < 2 {
        return Err(RasterError::InsufficientGlints { got: n });
    }
    let mut best_gated: Option<(usize, f64, [Option<usize>; 4])> = None;
    let mut best_any: Option<(f64, [Option<usize>; 4])> = None;

    // LED subsets of size >= 2, largest first so the gate can stop early.
    for k in (2..=4usize).rev() {
        if k > n {
            continue;
        }
        let mut led_subset = Vec::new();
        subsets_of_size(4, k, &mut led_subset, &mut |leds: &[usize]| {
            let mut picked = Vec::new();
            permutations(n, k, &mut picked, &mut |blobs: &[usize]| {
                let pairs: Vec<(Point2, Point3)> = leds
                    .iter()
                    .zip(blobs)
                    .map(|(&led, &blob)| (candidates[blob], rig.leds[led]))
                    .collect();
                let Some(score) = hypothesis_score(&pairs, camera, &config.lift) else {
                    return;
                };
                let mut assignment: [Option<usize>; 4] = [None; 4];
                for (&led, &blob) in leds.iter().zip(blobs) {
                    assignment[led] = Some(blob);
                }
                if score <= config.gate_mm
                    && best_gated
                        .as_ref()
                        .is_none_or(|(bk, bs, _)| k > *bk || (k == *bk && score < *bs))
                {
                    best_gated = Some((k, score, assignment));
                }
                if best_any.as_ref().is_none_or(|(bs, _)| score < *bs) {
                    best_any = Some((score, assignment));
                }
            });
        });
        if best_gated.as_ref().is_some_and(|(bk, _, _)| *bk == k) {
            break; // no smaller subset can beat a consistent larger one
        }
    }

    if let Some((_, score, assignment)) = best_gated {
        return Ok(GlintLabeling { assignment, score_mm: score });
    }
    if let Some((score, assignment)) = best_any {
        return Ok(GlintLabeling { assignment, score_mm: score });
    }
    Err(RasterError::InsufficientGlints { got: n })
}

fn subsets_of_size(total: usize, k: usize, current: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    fn rec(
        start: usize,
        total: usize,
        k: usize,
        current: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]),
    ) {
        if current.len() == k {
            f(current);
            return;
        }
        for i in start..total {
            current.push(i);
            rec(i + 1, total, k, current, f);
            current.pop();
        }
    }
    rec(0, total, k, current, f);
}

fn permutations(total: usize, k: usize, current: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if current.len() == k {
        f(current);
        return;
    }
    for i in 0..total {
        if current.contains(&i) {
            continue;
        }
        current.push(i);
        permutations(total, k, current, f);
        current.pop();
    }
}

// ── Full classical detection ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DetectConfig {
    /// Histogram fraction for the bright-tail threshold.
    pub bright_fraction: Option<f64>,
    pub blobs: Option<BlobConfig>,
    pub pupil: Option<PupilConfig>,
    pub labeling: Option<LabelingConfig>,
}

pub const DEFAULT_BRIGHT_FRACTION: f64 = 0.005;

/// Runs the classical raster pipeline on one frame: bright-tail threshold,
/// blob extraction, back-projection-scored glint labeling and pupil
/// ellipse fitting. Truth is not attached.
pub fn detect_frame(
    img: &GrayImage,
    rig: &LedRig,
    camera: &PinholeCamera,
    config: &DetectConfig,
) -> RasterResult<FrameObservation> {
    let bright_fraction = config.bright_fraction.unwrap_or(DEFAULT_BRIGHT_FRACTION);
    let blob_config = config.blobs.clone().unwrap_or_default();
    let pupil_config = config.pupil.clone().unwrap_or_default();
    let labeling_config = config.labeling.clone().unwrap_or_default();

    let (mask, threshold) = adaptive_threshold(img, bright_fraction);
    let blobs = extract_blobs(&mask, img, threshold, &blob_config);
    let candidates: Vec<Point2> = blobs.iter().map(|b| b.centroid).collect();
    let labeling = label_glints(&candidates, rig, camera, &labeling_config)?;

    let mut glints = [GlintObs { led: 0, uv: None }; 4];
    for (led, slot) in labeling.assignment.iter().enumerate() {
        glints[led] = GlintObs {
            led: (led + 1) as u8,
            uv: slot.map(|blob| candidates[blob]),
        };
    }
    let pupil = match fit_pupil_ellipse(img, &pupil_config) {
        Ok((center, _)) => Keypoint { uv: Some(center) },
        Err(RasterError::PupilNotFound) => Keypoint::absent(),
        Err(e) => return Err(e),
    };
    Ok(FrameObservation { pupil, glints, distractors: Vec::new(), truth: None })
}
