//! Parametric head model, skinning, subdivision, UV displacement and mesh
//! regularisers.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};

use crate::error::{param_err, Error, Result};
use crate::imaging::MaskImage;
use crate::io::Blob;
use crate::raster::{rasterize, Camera, Vec3};
use crate::sampling::{bilinear_taps, Taps};

#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
}

impl TriMesh {
    pub fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if self.uvs.len() != self.vertices.len() {
            return param_err("mesh uv count differs from vertex count");
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return param_err(format!("face {f:?} references a missing vertex"));
        }
        Ok(())
    }

    /// Index validity plus the non-degenerate face requirement.
    pub fn validate(&self) -> Result<()> {
        self.validate_indices()?;
        for (i, _) in self.faces.iter().enumerate() {
            if self.face_area(i) <= 1e-12 {
                return param_err(format!("face {i} is degenerate"));
            }
        }
        Ok(())
    }

    /// Unnormalised normal `(b - a) x (c - a)`.
    pub fn face_normal_raw(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (b - a).cross(&(c - a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * self.face_normal_raw(f).norm()
    }

    /// Area-weighted vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let fn_ = self.face_normal_raw(fi);
            for &i in f {
                n[i as usize] += fn_;
            }
        }
        n.iter()
            .map(|v| v.try_normalize(1e-300).unwrap_or_else(Vec3::zeros))
            .collect()
    }

    /// Unique undirected edges keyed `(min, max)`, sorted lexicographically.
    pub fn edges(&self) -> Vec<[u32; 2]> {
        let mut e: Vec<[u32; 2]> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| [a.min(b), a.max(b)])
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub rest: Vec3,
    pub parent: Option<usize>,
}

/// Linear blend-shape head with joint skinning.
///
/// Basis tensors are stored `[vertex][axis][component]`; skin weights
/// `[vertex][joint]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub template: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uvs: Vec<[f64; 2]>,
    pub n_shape: usize,
    pub shape_basis: Vec<f64>,
    pub n_expr: usize,
    pub expr_basis: Vec<f64>,
    pub joints: Vec<Joint>,
    pub skin_weights: Vec<f64>,
    pub scalp: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExpressionParams {
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
    /// Axis-angle per joint, three entries each.
    pub phi: Vec<f64>,
}

impl ExpressionParams {
    pub fn zeros(model: &HeadModel) -> Self {
        ExpressionParams {
            beta: vec![0.0; model.n_shape],
            psi: vec![0.0; model.n_expr],
            phi: vec![0.0; 3 * model.joints.len()],
        }
    }

    /// `[psi, phi]`, the input of the displacement model.
    pub fn conditioning(&self) -> Vec<f64> {
        self.psi.iter().chain(&self.phi).copied().collect()
    }
}

impl HeadModel {
    pub fn n_verts(&self) -> usize {
        self.template.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_verts();
        let nj = self.joints.len();
        self.template_mesh().validate_indices()?;
        if self.shape_basis.len() != n * 3 * self.n_shape
            || self.expr_basis.len() != n * 3 * self.n_expr
        {
            return param_err("blend-shape basis size does not match vertex count");
        }
        if nj == 0 || self.skin_weights.len() != n * nj {
            return param_err("skin weight table has the wrong size");
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if joint.parent.is_some_and(|p| p >= j) {
                return param_err(format!("joint {j} must come after its parent"));
            }
        }
        for v in 0..n {
            let row = &self.skin_weights[v * nj..(v + 1) * nj];
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return param_err(format!(
                    "skin weights of vertex {v} are not a partition of unity"
                ));
            }
        }
        if self
            .uvs
            .iter()
            .any(|uv| !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]))
        {
            return param_err("uv coordinates outside [0,1]^2");
        }
        let mut seen = HashSet::new();
        for &s in &self.scalp {
            if s as usize >= n || !seen.insert(s) {
                return param_err(format!("scalp index {s} out of range or repeated"));
            }
        }
        Ok(())
    }

    pub fn template_mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.template.clone(),
            faces: self.faces.clone(),
            uvs: self.uvs.clone(),
        }
    }

    fn check_params(&self, p: &ExpressionParams) -> Result<()> {
        if p.beta.len() != self.n_shape
            || p.psi.len() != self.n_expr
            || p.phi.len() != 3 * self.joints.len()
        {
            return param_err(format!(
                "parameter dims (beta {}, psi {}, phi {}) do not match model ({}, {}, {})",
                p.beta.len(),
                p.psi.len(),
                p.phi.len(),
                self.n_shape,
                self.n_expr,
                3 * self.joints.len()
            ));
        }
        if p.beta
            .iter()
            .chain(&p.psi)
            .chain(&p.phi)
            .any(|v| !v.is_finite())
        {
            return param_err("non-finite expression parameters");
        }
        Ok(())
    }

    /// Global joint transforms `(R, t)` so that a vertex bound to joint `j` maps to
    /// `R (v - J_j) + t`.
    fn joint_transforms(&self, phi: &[f64]) -> Vec<(Matrix3<f64>, Vec3)> {
        let mut out: Vec<(Matrix3<f64>, Vec3)> = Vec::with_capacity(self.joints.len());
        for (j, joint) in self.joints.iter().enumerate() {
            let aa = Vec3::new(phi[3 * j], phi[3 * j + 1], phi[3 * j + 2]);
            let local = *Rotation3::new(aa).matrix();
            let g = match joint.parent {
                None => (local, joint.rest),
                Some(p) => {
                    let (pr, pt) = out[p];
                    (pr * local, pr * (joint.rest - self.joints[p].rest) + pt)
                }
            };
            out.push(g);
        }
        out
    }

    /// Blend shapes, then linear blend skinning.
    pub fn lbs_deform(&self, params: &ExpressionParams) -> Result<TriMesh> {
        self.check_params(params)?;
        let nj = self.joints.len();
        let transforms = self.joint_transforms(&params.phi);
        let vertices = (0..self.n_verts())
            .map(|v| {
                let mut p = self.template[v];
                for axis in 0..3 {
                    let s = &self.shape_basis[(v * 3 + axis) * self.n_shape..][..self.n_shape];
                    let e = &self.expr_basis[(v * 3 + axis) * self.n_expr..][..self.n_expr];
                    p[axis] += s.iter().zip(&params.beta).map(|(a, b)| a * b).sum::<f64>();
                    p[axis] += e.iter().zip(&params.psi).map(|(a, b)| a * b).sum::<f64>();
                }
                let mut out = Vec3::zeros();
                for (j, (r, t)) in transforms.iter().enumerate() {
                    let w = self.skin_weights[v * nj + j];
                    if w != 0.0 {
                        out += (r * (p - self.joints[j].rest) + t) * w;
                    }
                }
                out
            })
            .collect();
        Ok(TriMesh {
            vertices,
            faces: self.faces.clone(),
            uvs: self.uvs.clone(),
        })
    }

    pub fn to_blob(&self) -> Blob {
        let n = self.n_verts();
        let nj = self.joints.len();
        let mut b = Blob::new("head_model");
        b.set_meta("n_verts", n);
        b.set_meta("n_faces", self.faces.len());
        b.set_meta("n_shape", self.n_shape);
        b.set_meta("n_expr", self.n_expr);
        b.set_meta("n_joints", nj);
        b.set_meta("n_scalp", self.scalp.len());
        let flat: Vec<f64> = self.template.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        b.push_f64("template", &[n, 3], &flat);
        b.push_u32(
            "faces",
            &[self.faces.len(), 3],
            self.faces.iter().flatten().copied().collect(),
        );
        b.push_f64(
            "uvs",
            &[n, 2],
            &self.uvs.iter().flatten().copied().collect::<Vec<_>>(),
        );
        b.push_f64("shape_basis", &[n, 3, self.n_shape], &self.shape_basis);
        b.push_f64("expr_basis", &[n, 3, self.n_expr], &self.expr_basis);
        let jr: Vec<f64> = self
            .joints
            .iter()
            .flat_map(|j| [j.rest.x, j.rest.y, j.rest.z])
            .collect();
        b.push_f64("joint_rest", &[nj, 3], &jr);
        // parent index + 1, 0 for roots
        b.push_u32(
            "joint_parent",
            &[nj],
            self.joints
                .iter()
                .map(|j| j.parent.map_or(0, |p| p as u32 + 1))
                .collect(),
        );
        b.push_f64("skin_weights", &[n, nj], &self.skin_weights);
        b.push_u32("scalp", &[self.scalp.len()], self.scalp.clone());
        b
    }

    pub fn from_blob(b: &Blob) -> Result<HeadModel> {
        if b.kind != "head_model" {
            return Err(Error::Format(format!(
                "expected head_model blob, found `{}`",
                b.kind
            )));
        }
        let n = b.meta_usize("n_verts")?;
        let n_shape = b.meta_usize("n_shape")?;
        let n_expr = b.meta_usize("n_expr")?;
        let (_, t) = b.f64_array("template")?;
        let (_, f) = b.u32_array("faces")?;
        let (_, uv) = b.f64_array("uvs")?;
        let (_, sb) = b.f64_array("shape_basis")?;
        let (_, eb) = b.f64_array("expr_basis")?;
        let (_, jr) = b.f64_array("joint_rest")?;
        let (_, jp) = b.u32_array("joint_parent")?;
        let (_, sw) = b.f64_array("skin_weights")?;
        let (_, scalp) = b.u32_array("scalp")?;
        if t.len() != 3 * n || uv.len() != 2 * n || f.len() % 3 != 0 || jr.len() != 3 * jp.len() {
            return Err(Error::Format(
                "head model arrays have inconsistent sizes".into(),
            ));
        }
        let model = HeadModel {
            template: t
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            faces: f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            uvs: uv.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            n_shape,
            shape_basis: sb,
            n_expr,
            expr_basis: eb,
            joints: jr
                .chunks_exact(3)
                .zip(&jp)
                .map(|(c, &p)| Joint {
                    rest: Vec3::new(c[0], c[1], c[2]),
                    parent: p.checked_sub(1).map(|p| p as usize),
                })
                .collect(),
            skin_weights: sw,
            scalp,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_blob().save(path)
    }

    pub fn load(path: &Path) -> Result<HeadModel> {
        HeadModel::from_blob(&Blob::load(path)?)
    }
}

/// Four-way subdivision: one midpoint per unique edge, appended after the original
/// vertices in sorted `(min, max)` edge order.
pub fn subdivide4(mesh: &TriMesh) -> Result<TriMesh> {
    mesh.validate_indices()?;
    let mut uses: BTreeMap<[u32; 2], u8> = BTreeMap::new();
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            let c = uses.entry([a.min(b), a.max(b)]).or_insert(0);
            *c += 1;
            if *c > 2 {
                return Err(Error::Topology(format!(
                    "edge ({}, {}) shared by more than two faces",
                    a.min(b),
                    a.max(b)
                )));
            }
        }
    }
    let base = mesh.vertices.len() as u32;
    let index: BTreeMap<[u32; 2], u32> = uses
        .keys()
        .enumerate()
        .map(|(i, e)| (*e, base + i as u32))
        .collect();
    let mut vertices = mesh.vertices.clone();
    let mut uvs = mesh.uvs.clone();
    for e in index.keys() {
        let (a, b) = (e[0] as usize, e[1] as usize);
        vertices.push((mesh.vertices[a] + mesh.vertices[b]) * 0.5);
        uvs.push([
            (mesh.uvs[a][0] + mesh.uvs[b][0]) * 0.5,
            (mesh.uvs[a][1] + mesh.uvs[b][1]) * 0.5,
        ]);
    }
    let mid = |a: u32, b: u32| index[&[a.min(b), a.max(b)]];
    let mut faces = Vec::with_capacity(mesh.faces.len() * 4);
    for &[a, b, c] in &mesh.faces {
        let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
        faces.extend_from_slice(&[[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
    }
    Ok(TriMesh {
        vertices,
        faces,
        uvs,
    })
}

/// UV-space displacement grid of world-space offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Vec3>,
}

impl DisplacementMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DisplacementMap {
            width,
            height,
            data: vec![Vec3::zeros(); width * height],
        }
    }

    pub fn sample(&self, uv: [f64; 2]) -> Vec3 {
        bilinear_taps(uv, self.width, self.height)
            .iter()
            .map(|&(i, w)| self.data[i] * w)
            .sum()
    }

    pub fn negated(&self) -> Self {
        DisplacementMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| -v).collect(),
        }
    }
}

/// `V_r = V + S(G_d)`, offsets bilinearly sampled at each vertex uv.
pub fn apply_displacement(mesh: &TriMesh, disp: &DisplacementMap) -> TriMesh {
    let vertices = mesh
        .vertices
        .iter()
        .zip(&mesh.uvs)
        .map(|(v, &uv)| v + disp.sample(uv))
        .collect();
    TriMesh {
        vertices,
        faces: mesh.faces.clone(),
        uvs: mesh.uvs.clone(),
    }
}

/// Displacement map as a linear function of the `[psi, phi]` conditioning vector:
/// `G_d = base + sum_k c_k basis_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementModel {
    pub base: DisplacementMap,
    pub basis: Vec<DisplacementMap>,
    pub enabled: bool,
}

impl DisplacementModel {
    pub fn zeros(width: usize, height: usize, n_cond: usize) -> Self {
        DisplacementModel {
            base: DisplacementMap::zeros(width, height),
            basis: vec![DisplacementMap::zeros(width, height); n_cond],
            enabled: true,
        }
    }

    pub fn evaluate(&self, cond: &[f64]) -> DisplacementMap {
        let mut out = self.base.clone();
        if !self.enabled {
            out.data.iter_mut().for_each(|v| *v = Vec3::zeros());
            return out;
        }
        for (c, b) in cond.iter().zip(&self.basis) {
            if *c != 0.0 {
                out.data
                    .iter_mut()
                    .zip(&b.data)
                    .for_each(|(o, v)| *o += v * *c);
            }
        }
        out
    }

    pub fn vertex_taps(&self, uvs: &[[f64; 2]]) -> Vec<Taps> {
        uvs.iter()
            .map(|&uv| bilinear_taps(uv, self.base.width, self.base.height))
            .collect()
    }

    pub fn vertex_offsets(&self, taps: &[Taps], cond: &[f64]) -> Vec<Vec3> {
        if !self.enabled {
            return vec![Vec3::zeros(); taps.len()];
        }
        taps.iter()
            .map(|t| {
                t.iter()
                    .map(|&(i, w)| {
                        let mut v = self.base.data[i];
                        for (c, b) in cond.iter().zip(&self.basis) {
                            v += b.data[i] * *c;
                        }
                        v * w
                    })
                    .sum()
            })
            .collect()
    }

    pub fn param_len(&self) -> usize {
        3 * self.base.data.len() * (1 + self.basis.len())
    }

    /// Flat parameters: base texels then each basis map, xyz per texel.
    pub fn params(&self) -> Vec<f64> {
        std::iter::once(&self.base)
            .chain(&self.basis)
            .flat_map(|m| m.data.iter().flat_map(|v| [v.x, v.y, v.z]))
            .collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.chunks_exact(3);
        for m in std::iter::once(&mut self.base).chain(self.basis.iter_mut()) {
            for v in m.data.iter_mut() {
                let c = it.next().expect("displacement parameter length");
                *v = Vec3::new(c[0], c[1], c[2]);
            }
        }
    }

    /// Pulls per-vertex offset gradients back onto the flat parameter layout.
    pub fn backward(&self, taps: &[Taps], cond: &[f64], vertex_grads: &[Vec3]) -> Vec<f64> {
        let texels = self.base.data.len();
        let mut g = vec![0.0; self.param_len()];
        for (t, gv) in taps.iter().zip(vertex_grads) {
            if *gv == Vec3::zeros() {
                continue;
            }
            for &(i, w) in t {
                for a in 0..3 {
                    g[3 * i + a] += w * gv[a];
                }
                for (k, c) in cond.iter().enumerate().take(self.basis.len()) {
                    for a in 0..3 {
                        g[3 * ((k + 1) * texels + i) + a] += w * c * gv[a];
                    }
                }
            }
        }
        g
    }

    pub fn to_blob(&self) -> Blob {
        let mut b = Blob::new("displacement");
        b.set_meta("width", self.base.width);
        b.set_meta("height", self.base.height);
        b.set_meta("n_basis", self.basis.len());
        b.set_meta("enabled", self.enabled);
        b.push_f64(
            "params",
            &[1 + self.basis.len(), self.base.height, self.base.width, 3],
            &self.params(),
        );
        b
    }

    pub fn from_blob(b: &Blob) -> Result<Self> {
        let (w, h, nb) = (
            b.meta_usize("width")?,
            b.meta_usize("height")?,
            b.meta_usize("n_basis")?,
        );
        let mut m = DisplacementModel::zeros(w, h, nb);
        m.enabled = b.meta_str("enabled")? == "true";
        let (_, p) = b.f64_array("params")?;
        if p.len() != m.param_len() {
            return Err(Error::Format("displacement parameter count".into()));
        }
        m.set_params(&p);
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerValues {
    pub lap: f64,
    pub nc: f64,
    pub el: f64,
}

/// Connectivity shared by every posed copy of a mesh.
#[derive(Clone, Debug)]
pub struct MeshTopology {
    pub n_verts: usize,
    pub faces: Vec<[u32; 3]>,
    pub edges: Vec<[u32; 2]>,
    neighbor_start: Vec<usize>,
    neighbors: Vec<u32>,
    /// Faces sharing an edge.
    pub face_pairs: Vec<[u32; 2]>,
    /// Vertices on an edge used by a single face.
    pub boundary: Vec<bool>,
}

impl MeshTopology {
    pub fn new(mesh: &TriMesh) -> Self {
        let edges = mesh.edges();
        let n = mesh.vertices.len();
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for e in &edges {
            adj[e[0] as usize].push(e[1]);
            adj[e[1] as usize].push(e[0]);
        }
        let mut neighbor_start = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        for a in adj {
            neighbor_start.push(neighbors.len());
            neighbors.extend(a);
        }
        neighbor_start.push(neighbors.len());
        let mut edge_faces: BTreeMap<[u32; 2], Vec<u32>> = BTreeMap::new();
        for (fi, f) in mesh.faces.iter().enumerate() {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edge_faces
                    .entry([a.min(b), a.max(b)])
                    .or_default()
                    .push(fi as u32);
            }
        }
        let face_pairs = edge_faces
            .values()
            .filter(|v| v.len() == 2)
            .map(|v| [v[0], v[1]])
            .collect();
        let mut boundary = vec![false; n];
        for (e, f) in &edge_faces {
            if f.len() == 1 {
                boundary[e[0] as usize] = true;
                boundary[e[1] as usize] = true;
            }
        }
        MeshTopology {
            n_verts: n,
            faces: mesh.faces.clone(),
            edges,
            neighbor_start,
            neighbors,
            face_pairs,
            boundary,
        }
    }

    pub fn neighbors(&self, v: usize) -> &[u32] {
        &self.neighbors[self.neighbor_start[v]..self.neighbor_start[v + 1]]
    }

    fn check(&self, mesh: &TriMesh, rest: &TriMesh) -> Result<()> {
        if mesh.vertices.len() != self.n_verts
            || rest.vertices.len() != self.n_verts
            || mesh.faces != rest.faces
        {
            return param_err("mesh and rest mesh have different topology");
        }
        Ok(())
    }

    pub fn regularizers(&self, mesh: &TriMesh, rest: &TriMesh) -> Result<RegularizerValues> {
        Ok(self.regularizer_grads(mesh, rest, [0.0; 3])?.0)
    }

    /// Values of the three regularisers and the gradient of
    /// `w[0] lap + w[1] nc + w[2] el` with respect to `mesh` vertices.
    pub fn regularizer_grads(
        &self,
        mesh: &TriMesh,
        rest: &TriMesh,
        w: [f64; 3],
    ) -> Result<(RegularizerValues, Vec<Vec3>)> {
        self.check(mesh, rest)?;
        let v = &mesh.vertices;
        let n = self.n_verts;
        let mut grad = vec![Vec3::zeros(); n];
        let mut out = RegularizerValues::default();

        // Laplacian over interior vertices; a boundary 1-ring is one-sided.
        let interior: Vec<usize> = (0..n)
            .filter(|&i| !self.boundary[i] && !self.neighbors(i).is_empty())
            .collect();
        if !interior.is_empty() {
            let n_int = interior.len() as f64;
            let mut sum = 0.0;
            for &i in &interior {
                let nb = self.neighbors(i);
                let mean: Vec3 = nb.iter().map(|&j| v[j as usize]).sum::<Vec3>() / nb.len() as f64;
                let l = v[i] - mean;
                sum += l.norm_squared();
                if w[0] != 0.0 {
                    let g = l * (2.0 * w[0] / n_int);
                    grad[i] += g;
                    let share = g / nb.len() as f64;
                    for &j in nb {
                        grad[j as usize] -= share;
                    }
                }
            }
            out.lap = sum / n_int;
        }

        if !self.face_pairs.is_empty() {
            let normals: Vec<(Vec3, f64)> = (0..self.faces.len())
                .map(|f| {
                    let m = mesh.face_normal_raw(f);
                    let len = m.norm();
                    (m / len, len)
                })
                .collect();
            let np = self.face_pairs.len() as f64;
            let mut gn = vec![Vec3::zeros(); self.faces.len()];
            let mut sum = 0.0;
            for &[f, g] in &self.face_pairs {
                let (nf, ng) = (normals[f as usize].0, normals[g as usize].0);
                sum += 1.0 - nf.dot(&ng);
                gn[f as usize] -= ng * (w[1] / np);
                gn[g as usize] -= nf * (w[1] / np);
            }
            out.nc = sum / np;
            if w[1] != 0.0 {
                for (fi, f) in self.faces.iter().enumerate() {
                    let (nf, len) = normals[fi];
                    let gm = (gn[fi] - nf * nf.dot(&gn[fi])) / len;
                    let [a, b, c] = f.map(|i| v[i as usize]);
                    let (e1, e2) = (b - a, c - a);
                    let gb = e2.cross(&gm);
                    let gc = gm.cross(&e1);
                    grad[f[1] as usize] += gb;
                    grad[f[2] as usize] += gc;
                    grad[f[0] as usize] -= gb + gc;
                }
            }
        }

        if !self.edges.is_empty() {
            let ne = self.edges.len() as f64;
            let mut sum = 0.0;
            for &[a, b] in &self.edges {
                let d = v[a as usize] - v[b as usize];
                let len = d.norm();
                let rest_len = (rest.vertices[a as usize] - rest.vertices[b as usize]).norm();
                let diff = len - rest_len;
                sum += diff * diff;
                if w[2] != 0.0 && len > 0.0 {
                    let g = d * (2.0 * w[2] * diff / (ne * len));
                    grad[a as usize] += g;
                    grad[b as usize] -= g;
                }
            }
            out.el = sum / ne;
        }
        Ok((out, grad))
    }
}

/// Laplacian, normal-consistency and edge-length energies of `mesh` against `rest`.
pub fn mesh_regularizers(mesh: &TriMesh, rest: &TriMesh) -> Result<RegularizerValues> {
    MeshTopology::new(mesh).regularizers(mesh, rest)
}

/// Scalp vertices that project inside `hair_mask` and are not hidden by the mesh.
///
/// A vertex passes the visibility test when the face covering its pixel contains the
/// vertex, or when its camera depth is within `1e-4` of the z-buffer there.
pub fn visible_scalp(
    mesh: &TriMesh,
    scalp: &[u32],
    hair_mask: &MaskImage,
    camera: &Camera,
) -> Result<Vec<u32>> {
    const TOL: f64 = 1e-4;
    if hair_mask.dims() != (camera.width, camera.height) {
        return param_err("hair mask size differs from camera image size");
    }
    let raster = rasterize(mesh, camera)?;
    let mut out = Vec::new();
    for &s in scalp {
        let pc = camera.to_camera(&mesh.vertices[s as usize]);
        if pc.z < camera.near {
            continue;
        }
        let [sx, sy] = camera.project_camera(&pc);
        if !(sx >= 0.0 && sy >= 0.0 && sx < camera.width as f64 && sy < camera.height as f64) {
            continue;
        }
        let (x, y) = (sx as usize, sy as usize);
        if !hair_mask.get(x, y) {
            continue;
        }
        let i = y * camera.width + x;
        let on_face = raster.covered(i) && mesh.faces[raster.face[i] as usize].contains(&s);
        if on_face || pc.z <= raster.depth.data[i] + TOL {
            out.push(s);
        }
    }
    Ok(out)
}
