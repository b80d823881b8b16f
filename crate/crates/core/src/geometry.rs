//! Observation windows, point patterns, covariate rasters and the quadrature
//! scheme used for every spatial integral.
//!
//! All rasters share one cell-indexing convention: cell `iy * nx + ix`
//! (row-major, `y` outer, `x` inner). Covariate lookups are nearest-cell
//! (piecewise constant), the same policy used to assign covariates to
//! quadrature centres, so event covariates and quadrature covariates always
//! agree.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangular observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Window {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let w = Window {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        w.validate()?;
        Ok(w)
    }

    /// The unit square `[0, 1]²`.
    pub fn unit() -> Self {
        Window {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::Contract(format!("invalid window {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// The window grown by `margin` on every side.
    pub fn dilate(&self, margin: f64) -> Self {
        Window {
            x_min: self.x_min - margin,
            x_max: self.x_max + margin,
            y_min: self.y_min - margin,
            y_max: self.y_max + margin,
        }
    }
}

/// Regular `nx × ny` lattice of cells tiling a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub window: Window,
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    pub fn new(window: Window, nx: usize, ny: usize) -> Result<Self> {
        window.validate()?;
        if nx == 0 || ny == 0 {
            return Err(Error::Contract("lattice needs at least one cell".into()));
        }
        Ok(Lattice { window, nx, ny })
    }

    /// Square `n × n` lattice on the unit window.
    pub fn unit(n: usize) -> Result<Self> {
        Self::new(Window::unit(), n, n)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.window.width() / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.window.height() / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn center(&self, cell: usize) -> [f64; 2] {
        let ix = cell % self.nx;
        let iy = cell / self.nx;
        [
            self.window.x_min + (ix as f64 + 0.5) * self.dx(),
            self.window.y_min + (iy as f64 + 0.5) * self.dy(),
        ]
    }

    /// Lower-left and upper-right corners of a cell.
    pub fn bounds(&self, cell: usize) -> ([f64; 2], [f64; 2]) {
        let ix = cell % self.nx;
        let iy = cell / self.nx;
        let x0 = self.window.x_min + ix as f64 * self.dx();
        let y0 = self.window.y_min + iy as f64 * self.dy();
        ([x0, y0], [x0 + self.dx(), y0 + self.dy()])
    }

    /// Index of the cell containing `(x, y)`: floor of the scaled coordinate,
    /// the top and right edges clamped into the last row/column.
    pub fn cell_of(&self, x: f64, y: f64) -> Result<usize> {
        if !self.window.contains(x, y) {
            return Err(Error::Domain(format!(
                "location ({x}, {y}) outside window {:?}",
                self.window
            )));
        }
        let ix = axis_index(x - self.window.x_min, self.window.width(), self.nx);
        let iy = axis_index(y - self.window.y_min, self.window.height(), self.ny);
        Ok(iy * self.nx + ix)
    }
}

fn axis_index(offset: f64, extent: f64, n: usize) -> usize {
    let scaled = (offset / extent * n as f64).floor();
    if scaled <= 0.0 {
        0
    } else {
        (scaled as usize).min(n - 1)
    }
}

/// Event locations inside a window.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPattern {
    points: Vec<[f64; 2]>,
    window: Window,
}

#[derive(Serialize, Deserialize)]
struct PointRecord {
    x: f64,
    y: f64,
}

impl PointPattern {
    pub fn new(points: Vec<[f64; 2]>, window: Window) -> Result<Self> {
        window.validate()?;
        if let Some(p) = points.iter().find(|p| !window.contains(p[0], p[1])) {
            return Err(Error::Domain(format!(
                "point ({}, {}) outside window {window:?}",
                p[0], p[1]
            )));
        }
        Ok(PointPattern { points, window })
    }

    pub fn empty(window: Window) -> Self {
        PointPattern {
            points: Vec::new(),
            window,
        }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-pattern of the events at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointPattern {
        PointPattern {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            window: self.window,
        }
    }

    /// Reads a CSV with header `x,y`.
    pub fn read_csv<R: Read>(reader: R, window: Window) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for rec in rdr.deserialize() {
            let rec: PointRecord = rec?;
            points.push([rec.x, rec.y]);
        }
        Self::new(points, window)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in &self.points {
            wtr.serialize(PointRecord { x: p[0], y: p[1] })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, window: Window) -> Result<Self> {
        Self::read_csv(fs::File::open(path)?, window)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }
}

/// `p` covariate rasters on a shared lattice: the map `z(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateStack {
    lattice: Lattice,
    names: Vec<String>,
    layers: Vec<Vec<f64>>,
}

/// On-disk descriptor of a covariate stack. Layer paths are resolved relative
/// to the descriptor's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackDescriptor {
    pub window: Window,
    pub nx: usize,
    pub ny: usize,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub path: PathBuf,
}

/// File name used for the descriptor when a stack is written to a directory.
pub const STACK_DESCRIPTOR: &str = "covariates.json";

impl CovariateStack {
    pub fn new(lattice: Lattice, names: Vec<String>, layers: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != layers.len() {
            return Err(Error::Contract(format!(
                "{} names for {} layers",
                names.len(),
                layers.len()
            )));
        }
        if layers.is_empty() {
            return Err(Error::Contract("covariate stack has no layers".into()));
        }
        for (name, layer) in names.iter().zip(&layers) {
            if layer.len() != lattice.n_cells() {
                return Err(Error::Contract(format!(
                    "layer {name} has {} values, lattice has {} cells",
                    layer.len(),
                    lattice.n_cells()
                )));
            }
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("layer {name} has non-finite values")));
            }
        }
        Ok(CovariateStack {
            lattice,
            names,
            layers,
        })
    }

    /// Layers named `z1, z2, ...`.
    pub fn from_layers(lattice: Lattice, layers: Vec<Vec<f64>>) -> Result<Self> {
        let names = (1..=layers.len()).map(|i| format!("z{i}")).collect();
        Self::new(lattice, names, layers)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn window(&self) -> &Window {
        &self.lattice.window
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn n_covariates(&self) -> usize {
        self.layers.len()
    }

    pub fn cell_values(&self, cell: usize) -> Vec<f64> {
        self.layers.iter().map(|l| l[cell]).collect()
    }

    /// Covariate vector of the lattice cell containing `s`.
    pub fn covariate_at(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        let cell = self.lattice.cell_of(x, y)?;
        Ok(self.cell_values(cell))
    }

    pub fn load(descriptor: impl AsRef<Path>) -> Result<Self> {
        let descriptor = descriptor.as_ref();
        let desc: StackDescriptor = serde_json::from_reader(fs::File::open(descriptor)?)?;
        let base = descriptor.parent().unwrap_or_else(|| Path::new("."));
        let lattice = Lattice::new(desc.window, desc.nx, desc.ny)?;
        let mut names = Vec::with_capacity(desc.layers.len());
        let mut layers = Vec::with_capacity(desc.layers.len());
        for entry in &desc.layers {
            let path = if entry.path.is_absolute() {
                entry.path.clone()
            } else {
                base.join(&entry.path)
            };
            layers.push(read_layer_csv(fs::File::open(&path)?)?);
            names.push(entry.name.clone());
        }
        Self::new(lattice, names, layers)
    }

    /// Loads a stack from either a descriptor file or a directory holding
    /// `covariates.json`.
    pub fn load_any(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.is_dir() {
            Self::load(path.join(STACK_DESCRIPTOR))
        } else {
            Self::load(path)
        }
    }

    /// Writes `covariates.json` and one CSV per layer into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (name, layer) in self.names.iter().zip(&self.layers) {
            let file = PathBuf::from(format!("{name}.csv"));
            write_layer_csv(fs::File::create(dir.join(&file))?, layer, self.lattice.nx)?;
            entries.push(LayerEntry {
                name: name.clone(),
                path: file,
            });
        }
        let desc = StackDescriptor {
            window: self.lattice.window,
            nx: self.lattice.nx,
            ny: self.lattice.ny,
            layers: entries,
        };
        let path = dir.join(STACK_DESCRIPTOR);
        serde_json::to_writer_pretty(fs::File::create(&path)?, &desc)?;
        Ok(path)
    }
}

/// Reads every numeric field of a header-less CSV, row-major.
pub fn read_layer_csv<R: Read>(reader: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    for rec in rdr.records() {
        for field in rec?.iter().filter(|f| !f.is_empty()) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Invalid(format!("not a number: {field:?}")))?;
            values.push(v);
        }
    }
    Ok(values)
}

/// Writes one lattice row (`nx` values) per line.
pub fn write_layer_csv<W: Write>(writer: W, values: &[f64], nx: usize) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    for row in values.chunks(nx) {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Cell decomposition of the window used to approximate spatial integrals
/// by `Σ h(t_i)|T_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    lattice: Lattice,
    centers: Vec<[f64; 2]>,
    volumes: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(lattice: Lattice) -> Self {
        let n = lattice.n_cells();
        let vol = lattice.cell_area();
        QuadratureGrid {
            centers: (0..n).map(|i| lattice.center(i)).collect(),
            volumes: vec![vol; n],
            lattice,
        }
    }

    /// Quadrature on the covariate lattice refined `refine` times per axis.
    pub fn for_stack(stack: &CovariateStack, refine: usize) -> Result<Self> {
        if refine == 0 {
            return Err(Error::Contract("refinement factor must be >= 1".into()));
        }
        let l = stack.lattice();
        Ok(Self::new(Lattice::new(l.window, l.nx * refine, l.ny * refine)?))
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn window(&self) -> &Window {
        &self.lattice.window
    }

    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Result<usize> {
        self.lattice.cell_of(x, y)
    }

    /// `Σ_i h_i |T_i|`.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_cells() {
            return Err(Error::Contract(format!(
                "{} values for {} quadrature cells",
                values.len(),
                self.n_cells()
            )));
        }
        Ok(values
            .iter()
            .zip(&self.volumes)
            .map(|(h, v)| h * v)
            .sum())
    }

    /// Number of events of `pattern` falling in each cell.
    pub fn counts(&self, pattern: &PointPattern) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.n_cells()];
        for p in pattern.points() {
            counts[self.cell_of(p[0], p[1])?] += 1.0;
        }
        Ok(counts)
    }

    /// Covariate vectors at the cell centres, one column per covariate.
    ///
    /// Requires the grid to be an integer refinement of the stack lattice
    /// over the same window, so every quadrature cell sits inside exactly one
    /// covariate cell.
    pub fn covariate_columns(&self, stack: &CovariateStack) -> Result<Vec<Vec<f64>>> {
        let cov = stack.lattice();
        if cov.window != self.lattice.window
            || self.lattice.nx % cov.nx != 0
            || self.lattice.ny % cov.ny != 0
        {
            return Err(Error::Contract(format!(
                "quadrature lattice {}x{} is not an integer refinement of covariate lattice {}x{} on the same window",
                self.lattice.nx, self.lattice.ny, cov.nx, cov.ny
            )));
        }
        let rx = self.lattice.nx / cov.nx;
        let ry = self.lattice.ny / cov.ny;
        let map: Vec<usize> = (0..self.n_cells())
            .map(|i| {
                let ix = i % self.lattice.nx;
                let iy = i / self.lattice.nx;
                (iy / ry) * cov.nx + ix / rx
            })
            .collect();
        Ok(stack
            .layers()
            .iter()
            .map(|layer| map.iter().map(|&c| layer[c]).collect())
            .collect())
    }
}

/// `Σ_i h(t_i)|T_i|` over the quadrature grid.
pub fn quad_integrate(grid: &QuadratureGrid, values: &[f64]) -> Result<f64> {
    grid.integrate(values)
}
