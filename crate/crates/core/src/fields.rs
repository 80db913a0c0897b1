//! Piecewise-constant diffusion coefficients and piecewise-affine source terms.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Domain, TriMesh};

/// Cells per SPE10 model 2 layer (60 x 220).
pub const SPE10_LAYER_CELLS: usize = 60 * 220;
/// Layers in SPE10 model 2.
pub const SPE10_LAYERS: usize = 85;
/// Horizontal cell size of SPE10 model 2 in the units used here.
pub const SPE10_CELL: [f64; 2] = [0.02, 0.01];

/// How cell values are laid out in space.
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    /// A single value valid everywhere.
    Uniform,
    /// `nx x ny` cells of size `cell` whose lower-left corner is `origin`.
    Grid { origin: [f64; 2], cell: [f64; 2] },
}

/// A positive scalar coefficient that is constant on the cells of a rectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGridField {
    nx: usize,
    ny: usize,
    layout: Layout,
    /// Row-major, `x` fastest.
    values: Vec<f64>,
}

impl CellGridField {
    pub fn new(nx: usize, ny: usize, layout: Layout, values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Domain(format!("coefficient grid {nx}x{ny} is empty")));
        }
        if values.len() != nx * ny {
            return Err(Error::Dimension(format!(
                "coefficient grid {nx}x{ny} needs {} values, got {}",
                nx * ny,
                values.len()
            )));
        }
        if let Some((k, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!(
                "coefficient value {v} in cell {k} is not a positive finite number"
            )));
        }
        if matches!(layout, Layout::Uniform) && nx * ny != 1 {
            return Err(Error::Domain("a uniform coefficient has exactly one cell".into()));
        }
        Ok(Self {
            nx,
            ny,
            layout,
            values,
        })
    }

    /// Cells of side `1/n` covering the unit square.
    pub fn on_unit_square(n: usize, values: Vec<f64>) -> Result<Self> {
        let cell = 1.0 / n as f64;
        Self::new(
            n,
            n,
            Layout::Grid {
                origin: [0.0, 0.0],
                cell: [cell, cell],
            },
            values,
        )
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn layout(&self) -> &Layout {
        &self.layout
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
    /// Lower bound of `1/A`.
    pub fn alpha(&self) -> f64 {
        1.0 / self.max()
    }
    /// Upper bound of `1/A`.
    pub fn beta(&self) -> f64 {
        1.0 / self.min()
    }
    /// `beta / alpha = max A / min A`.
    pub fn contrast(&self) -> f64 {
        self.max() / self.min()
    }

    fn cell_index(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        match self.layout {
            Layout::Uniform => Some((0, 0)),
            Layout::Grid { origin, cell } => {
                let fi = ((p[0] - origin[0]) / cell[0]).floor();
                let fj = ((p[1] - origin[1]) / cell[1]).floor();
                if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.ny as f64 {
                    None
                } else {
                    Some((fi as usize, fj as usize))
                }
            }
        }
    }

    /// Value at a point, or `None` outside the grid.
    pub fn value_at(&self, p: [f64; 2]) -> Option<f64> {
        self.cell_index(p).map(|(i, j)| self.value(i, j))
    }

    /// Value of the cell holding the centroid of triangle `t`, after checking
    /// that the whole triangle lies in that cell.
    pub fn eval_on_triangle(&self, mesh: &TriMesh, t: usize) -> Result<f64> {
        let c = mesh.centroid(t);
        let (i, j) = self.cell_index(c).ok_or_else(|| Error::Alignment {
            triangle: t,
            detail: format!("centroid ({}, {}) lies outside the coefficient grid", c[0], c[1]),
        })?;
        if let Layout::Grid { origin, cell } = self.layout {
            let lo = [origin[0] + i as f64 * cell[0], origin[1] + j as f64 * cell[1]];
            let hi = [lo[0] + cell[0], lo[1] + cell[1]];
            for p in mesh.triangle_points(t) {
                for d in 0..2 {
                    let tol = 1e-12 * p[d].abs().max(1.0);
                    if p[d] < lo[d] - tol || p[d] > hi[d] + tol {
                        return Err(Error::Alignment {
                            triangle: t,
                            detail: format!(
                                "vertex ({}, {}) leaves coefficient cell ({i}, {j})",
                                p[0], p[1]
                            ),
                        });
                    }
                }
            }
        }
        Ok(self.value(i, j))
    }

    /// [`CellGridField::eval_on_triangle`] for every triangle of `mesh`.
    pub fn eval_on_mesh(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        (0..mesh.num_triangles()).map(|t| self.eval_on_triangle(mesh, t)).collect()
    }
}

/// `A = value` everywhere.
pub fn make_constant(value: f64) -> Result<CellGridField> {
    CellGridField::new(1, 1, Layout::Uniform, vec![value])
}

/// `n x n` cells on the unit square with values `exp(amplitude * w)`, `w ~ U[0,1)`.
///
/// The draws come from ChaCha8 seeded with `seed_from_u64(seed)`, one `f64`
/// per cell in row-major order with `x` fastest.
pub fn make_noise(n: usize, amplitude: f64, seed: u64) -> Result<CellGridField> {
    if n == 0 {
        return Err(Error::Domain("noise grid needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..n * n)
        .map(|_| (amplitude * rng.random::<f64>()).exp())
        .collect();
    CellGridField::on_unit_square(n, values)
}

/// Layout of the binary channel coefficient.
///
/// Rows `j` with `j % period < thickness` are high-conductivity channels that
/// span the whole width. Between consecutive channels one vertical connector of
/// `connector_width` columns links them; connectors alternate between the
/// column starting at `n/4` and the one starting at `3n/4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub period: usize,
    pub thickness: usize,
    pub connector_width: usize,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        Self {
            period: 16,
            thickness: 2,
            connector_width: 2,
        }
    }
}

impl ChannelSpec {
    fn channel_count(&self, n: usize) -> usize {
        if self.thickness == 0 || self.period == 0 {
            return 0;
        }
        (0..n).filter(|j| j % self.period == 0).count()
    }

    fn is_high(&self, n: usize, i: usize, j: usize) -> bool {
        if self.period == 0 || self.thickness == 0 {
            return false;
        }
        let r = j % self.period;
        if r < self.thickness {
            return true;
        }
        let gap = j / self.period;
        // a gap only exists if another channel follows
        if (gap + 1) * self.period >= n {
            return false;
        }
        let start = if gap % 2 == 0 { n / 4 } else { 3 * n / 4 };
        i >= start && i < (start + self.connector_width).min(n)
    }

    /// Fraction of high cells implied by the parameters on an `n x n` grid.
    pub fn expected_high_fraction(&self, n: usize) -> f64 {
        if self.period == 0 || self.thickness == 0 || n == 0 {
            return 0.0;
        }
        let channels = self.channel_count(n);
        let last = (channels - 1) * self.period;
        let rows = (channels - 1) * self.thickness.min(self.period) + self.thickness.min(n - last);
        let gaps = channels - 1;
        let gap_rows = self.period - self.thickness.min(self.period);
        let cw = |start: usize| (start + self.connector_width).min(n) - start.min(n);
        let (even, odd) = (gaps.div_ceil(2), gaps / 2);
        let connector = gap_rows * (even * cw(n / 4) + odd * cw(3 * n / 4));
        (rows * n + connector) as f64 / (n * n) as f64
    }
}

/// Binary field on `n x n` unit-square cells: `high` in channels, `1` elsewhere.
pub fn make_channels(n: usize, high: f64, spec: &ChannelSpec) -> Result<CellGridField> {
    if n == 0 {
        return Err(Error::Domain("channel grid needs n >= 1".into()));
    }
    let mut values = vec![1.0; n * n];
    for j in 0..n {
        for i in 0..n {
            if spec.is_high(n, i, j) {
                values[j * n + i] = high;
            }
        }
    }
    CellGridField::on_unit_square(n, values)
}

/// `exp(10)` on `y < 1/2` and on the bump `[1/2 - 1/32, 1/2 + 1/32] x [1/2, 1/2 + 1/32]`, `1` elsewhere.
pub fn make_instability_field() -> Result<CellGridField> {
    let n = 32;
    let high = 10f64.exp();
    let mut values = vec![1.0; n * n];
    for j in 0..n {
        for i in 0..n {
            if j < n / 2 || ((i == 15 || i == 16) && j == 16) {
                values[j * n + i] = high;
            }
        }
    }
    CellGridField::on_unit_square(n, values)
}

/// Permeability component stored in the SPE10 model 2 file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spe10Component {
    #[default]
    Kx,
    Ky,
    Kz,
}

impl Spe10Component {
    fn offset(self) -> usize {
        match self {
            Spe10Component::Kx => 0,
            Spe10Component::Ky => 1,
            Spe10Component::Kz => 2,
        }
    }
}

impl FromStr for Spe10Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kx" => Ok(Spe10Component::Kx),
            "ky" => Ok(Spe10Component::Ky),
            "kz" => Ok(Spe10Component::Kz),
            _ => Err(Error::Config(format!("unknown SPE10 component `{s}` (expected kx, ky or kz)"))),
        }
    }
}

impl fmt::Display for Spe10Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spe10Component::Kx => "kx",
            Spe10Component::Ky => "ky",
            Spe10Component::Kz => "kz",
        })
    }
}

fn spe10_layout() -> Layout {
    Layout::Grid {
        origin: [0.0, 0.0],
        cell: SPE10_CELL,
    }
}

/// Reads layer `layer` (1-based) of the `kx` permeability from an SPE10 model 2 file.
pub fn load_spe10(path: &Path, layer: usize) -> Result<CellGridField> {
    load_spe10_component(path, layer, Spe10Component::Kx)
}

/// Reads one layer of one permeability component.
///
/// The file holds whitespace-separated values with `x` fastest, then `y`, then
/// the layer. A complete file stores `kx`, `ky` and `kz` for all 85 layers one
/// after another; a file with any other multiple of 60 x 220 values is read as
/// a single component and `component` is ignored.
pub fn load_spe10_component(path: &Path, layer: usize, component: Spe10Component) -> Result<CellGridField> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        hint: if e.kind() == std::io::ErrorKind::NotFound {
            "; the SPE10 model 2 permeability file (spe_perm.dat) is not distributed with this \
             crate, download it from the SPE comparative solution project and pass its location"
                .into()
        } else {
            String::new()
        },
        source: e,
    })?;
    let mut values = Vec::new();
    for (k, tok) in text.split_whitespace().enumerate() {
        let v: f64 = tok.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("value {k} `{tok}` is not a number"),
        })?;
        values.push(v);
    }
    let n = values.len();
    if n == 0 || n % SPE10_LAYER_CELLS != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            detail: format!(
                "expected a positive multiple of {SPE10_LAYER_CELLS} values (60 x 220 per layer), found {n}"
            ),
        });
    }
    let full = 3 * SPE10_LAYERS * SPE10_LAYER_CELLS;
    let (layers, base) = if n == full {
        (SPE10_LAYERS, component.offset() * SPE10_LAYERS * SPE10_LAYER_CELLS)
    } else {
        (n / SPE10_LAYER_CELLS, 0)
    };
    if layer == 0 || layer > layers {
        return Err(Error::Config(format!(
            "SPE10 layer {layer} out of range 1..={layers} in {}",
            path.display()
        )));
    }
    let start = base + (layer - 1) * SPE10_LAYER_CELLS;
    CellGridField::new(60, 220, spe10_layout(), values[start..start + SPE10_LAYER_CELLS].to_vec())
}

/// Writes layers in the SPE10 text layout read by [`load_spe10_component`].
pub fn write_spe10(path: &Path, layers: &[CellGridField]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for layer in layers {
        if layer.nx != 60 || layer.ny != 220 {
            return Err(Error::Dimension(format!(
                "SPE10 layers are 60x220, got {}x{}",
                layer.nx, layer.ny
            )));
        }
        for chunk in layer.values.chunks(6) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `[xmin, xmax, ymin, ymax]`; bounds may be infinite.
pub type Rect = [f64; 4];

/// An affine function `c0 + cx x + cy y` restricted to a rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePiece {
    pub rect: Rect,
    pub coeffs: [f64; 3],
}

impl SourcePiece {
    fn eval(&self, p: [f64; 2]) -> f64 {
        self.coeffs[0] + self.coeffs[1] * p[0] + self.coeffs[2] * p[1]
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.rect[0] && p[0] < self.rect[1] && p[1] >= self.rect[2] && p[1] < self.rect[3]
    }

    /// Exact integral over the intersection with a bounded rectangle.
    fn integral_over(&self, r: Rect) -> f64 {
        let x0 = r[0].max(self.rect[0]);
        let x1 = r[1].min(self.rect[1]);
        let y0 = r[2].max(self.rect[2]);
        let y1 = r[3].min(self.rect[3]);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        (x1 - x0) * (y1 - y0) * self.eval([0.5 * (x0 + x1), 0.5 * (y0 + y1)])
    }

    /// `int |f|` over the intersection, by midpoint subdivision (exact when `f`
    /// keeps its sign on every sub-rectangle).
    fn abs_integral_over(&self, r: Rect) -> f64 {
        let x0 = r[0].max(self.rect[0]);
        let x1 = r[1].min(self.rect[1]);
        let y0 = r[2].max(self.rect[2]);
        let y1 = r[3].min(self.rect[3]);
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let n = 64;
        let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                let p = [x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy];
                s += self.eval(p).abs();
            }
        }
        s * dx * dy
    }
}

/// A source term that is affine on each of a few axis-aligned rectangles.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceField {
    pieces: Vec<SourcePiece>,
}

/// Named source terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    /// `+1` on `[0,1/4]^2`, `-1` on `[3/4,1]^2`.
    CheckerQuarters,
    /// `-1` for `y < 1/2`, `+1` otherwise.
    HalfplanePm1,
    /// `1/2 + x - y` on `[0,1/2]^2`, `-(1/2 + x - y)` on `[1/2,1]^2`.
    LshapeLinear,
    /// `+1` on `lo`, `-1` on `hi`.
    Wells { lo: Rect, hi: Rect },
}

impl SourceTag {
    /// Injection and production wells in the lower-left and upper-right SPE10 fine cells.
    pub fn spe10_wells() -> Self {
        SourceTag::Wells {
            lo: [0.0, SPE10_CELL[0], 0.0, SPE10_CELL[1]],
            hi: [1.2 - SPE10_CELL[0], 1.2, 2.2 - SPE10_CELL[1], 2.2],
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::CheckerQuarters => f.write_str("checker_quarters"),
            SourceTag::HalfplanePm1 => f.write_str("halfplane_pm1"),
            SourceTag::LshapeLinear => f.write_str("lshape_linear"),
            SourceTag::Wells { .. } => f.write_str("wells"),
        }
    }
}

impl FromStr for SourceTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker_quarters" => Ok(SourceTag::CheckerQuarters),
            "halfplane_pm1" => Ok(SourceTag::HalfplanePm1),
            "lshape_linear" => Ok(SourceTag::LshapeLinear),
            "wells" => Ok(SourceTag::spe10_wells()),
            _ => Err(Error::Config(format!("unknown source `{s}`"))),
        }
    }
}

/// Rectangles whose union is the domain.
fn domain_rects(domain: &Domain) -> Result<Vec<Rect>> {
    let g = domain.base_grid()?;
    let mut out = Vec::new();
    for j in 0..g.ny {
        for i in 0..g.nx {
            if g.is_active(i, j) {
                let x = i as f64 * g.dx;
                let y = j as f64 * g.dy;
                out.push([x, x + g.dx, y, y + g.dy]);
            }
        }
    }
    Ok(out)
}

fn rect_inside(r: Rect, rects: &[Rect]) -> bool {
    let tol = 1e-12;
    rects.iter().any(|d| {
        r[0] >= d[0] - tol && r[1] <= d[1] + tol && r[2] >= d[2] - tol && r[3] <= d[3] + tol
    })
}

/// Builds a named source and checks that it integrates to zero over `domain`.
pub fn make_source(tag: &SourceTag, domain: &Domain) -> Result<SourceField> {
    let inf = f64::INFINITY;
    let constant = |rect: Rect, c: f64| SourcePiece {
        rect,
        coeffs: [c, 0.0, 0.0],
    };
    let pieces = match tag {
        SourceTag::CheckerQuarters => vec![
            constant([0.0, 0.25, 0.0, 0.25], 1.0),
            constant([0.75, 1.0, 0.75, 1.0], -1.0),
        ],
        SourceTag::HalfplanePm1 => vec![
            constant([-inf, inf, -inf, 0.5], -1.0),
            constant([-inf, inf, 0.5, inf], 1.0),
        ],
        SourceTag::LshapeLinear => vec![
            SourcePiece {
                rect: [0.0, 0.5, 0.0, 0.5],
                coeffs: [0.5, 1.0, -1.0],
            },
            SourcePiece {
                rect: [0.5, 1.0, 0.5, 1.0],
                coeffs: [-0.5, -1.0, 1.0],
            },
        ],
        SourceTag::Wells { lo, hi } => {
            let rects = domain_rects(domain)?;
            for (name, r) in [("lower", lo), ("upper", hi)] {
                if !(r[0] < r[1] && r[2] < r[3]) || !rect_inside(*r, &rects) {
                    return Err(Error::Domain(format!(
                        "{name} well rectangle {r:?} is empty or not inside the domain {domain}"
                    )));
                }
            }
            vec![constant(*lo, 1.0), constant(*hi, -1.0)]
        }
    };
    let field = SourceField { pieces };
    field.check_compatibility(domain)?;
    Ok(field)
}

impl SourceField {
    pub fn new(pieces: Vec<SourcePiece>) -> Self {
        Self { pieces }
    }

    pub fn zero() -> Self {
        Self { pieces: Vec::new() }
    }

    pub fn pieces(&self) -> &[SourcePiece] {
        &self.pieces
    }

    /// Point value (pieces are half-open on their upper bounds).
    pub fn value(&self, p: [f64; 2]) -> f64 {
        self.pieces.iter().filter(|q| q.contains(p)).map(|q| q.eval(p)).sum()
    }

    /// `(int f, int |f|)` over `domain`.
    pub fn domain_integrals(&self, domain: &Domain) -> Result<(f64, f64)> {
        let rects = domain_rects(domain)?;
        let mut total = 0.0;
        let mut l1 = 0.0;
        for piece in &self.pieces {
            for &r in &rects {
                total += piece.integral_over(r);
                l1 += piece.abs_integral_over(r);
            }
        }
        Ok((total, l1))
    }

    /// Checks `|int f| <= 1e-12 int |f|`.
    pub fn check_compatibility(&self, domain: &Domain) -> Result<()> {
        let (total, l1) = self.domain_integrals(domain)?;
        if total.abs() > 1e-12 * l1 {
            return Err(Error::Domain(format!(
                "source integrates to {total:e} over {domain} (L1 norm {l1:e})"
            )));
        }
        Ok(())
    }

    /// `int_t f` for every triangle; each triangle must lie inside or outside every piece.
    pub fn triangle_integrals(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        (0..mesh.num_triangles())
            .map(|t| {
                let c = mesh.centroid(t);
                let pts = mesh.triangle_points(t);
                let mut s = 0.0;
                for piece in &self.pieces {
                    let inside = piece.contains(c);
                    let r = piece.rect;
                    for p in pts {
                        let tol = 1e-12 * p[0].abs().max(p[1].abs()).max(1.0);
                        let strictly_in = p[0] > r[0] + tol && p[0] < r[1] - tol && p[1] > r[2] + tol && p[1] < r[3] - tol;
                        let strictly_out = p[0] < r[0] - tol || p[0] > r[1] + tol || p[1] < r[2] - tol || p[1] > r[3] + tol;
                        if (inside && strictly_out) || (!inside && strictly_in) {
                            return Err(Error::Alignment {
                                triangle: t,
                                detail: format!("source region {r:?} cuts the triangle"),
                            });
                        }
                    }
                    if inside {
                        // the centroid rule is exact for affine integrands
                        s += mesh.area(t) * piece.eval(c);
                    }
                }
                Ok(s)
            })
            .collect()
    }
}
