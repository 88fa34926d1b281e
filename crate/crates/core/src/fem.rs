//! Linear Lagrange finite-element operators on triangles.

use nalgebra::DVector;
use nalgebra_sparse::CsrMatrix;

use crate::error::{check_len, OedError, Result};
use crate::mesh::{signed_area, Mesh};
use crate::sparse::{row_sums, TripletBuilder};

/// Mass, stiffness and lumped mass matrices of a mesh.
#[derive(Debug, Clone)]
pub struct FemOperators {
    pub mass: CsrMatrix<f64>,
    pub stiffness: CsrMatrix<f64>,
    pub lumped_mass: DVector<f64>,
    pub n: usize,
}

struct Element {
    nodes: [usize; 3],
    area: f64,
    grads: [[f64; 2]; 3],
}

fn elements(mesh: &Mesh) -> Result<Vec<Element>> {
    mesh.triangles
        .iter()
        .enumerate()
        .map(|(t, &nodes)| {
            let [p0, p1, p2] = nodes.map(|v| mesh.nodes[v]);
            let area = signed_area(p0, p1, p2);
            let scale = [p0, p1, p2]
                .iter()
                .flat_map(|p| p.iter())
                .fold(0.0_f64, |m, v| m.max(v.abs()))
                .max(1.0);
            if !(area > 1e-14 * scale * scale) {
                return Err(OedError::DegenerateTriangle { index: t, area });
            }
            let two_a = 2.0 * area;
            let grads = [
                [(p1[1] - p2[1]) / two_a, (p2[0] - p1[0]) / two_a],
                [(p2[1] - p0[1]) / two_a, (p0[0] - p2[0]) / two_a],
                [(p0[1] - p1[1]) / two_a, (p1[0] - p0[0]) / two_a],
            ];
            Ok(Element { nodes, area, grads })
        })
        .collect()
}

#[inline]
fn local_mass(area: f64, i: usize, j: usize) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// Assembles `M`, `K` and the lumped mass with exact quadrature.
pub fn assemble(mesh: &Mesh) -> Result<FemOperators> {
    let n = mesh.n_nodes();
    let elems = elements(mesh)?;
    let mut m = TripletBuilder::with_capacity(n, n, 9 * elems.len());
    let mut k = TripletBuilder::with_capacity(n, n, 9 * elems.len());
    for e in &elems {
        for a in 0..3 {
            for b in 0..3 {
                let (ia, ib) = (e.nodes[a], e.nodes[b]);
                m.push(ia, ib, local_mass(e.area, a, b));
                let g = e.grads[a][0] * e.grads[b][0] + e.grads[a][1] * e.grads[b][1];
                k.push(ia, ib, e.area * g);
            }
        }
    }
    let mass = m.build();
    let stiffness = k.build();
    let lumped_mass = row_sums(&mass);
    Ok(FemOperators {
        mass,
        stiffness,
        lumped_mass,
        n,
    })
}

/// Galerkin advection matrix `C_ij = ∫ (v·∇φ_j) φ_i` for a nodal (P1) velocity.
pub fn assemble_advection(mesh: &Mesh, velocity: &[[f64; 2]]) -> Result<CsrMatrix<f64>> {
    let n = mesh.n_nodes();
    check_len("velocity", n, velocity.len())?;
    let elems = elements(mesh)?;
    let mut c = TripletBuilder::with_capacity(n, n, 9 * elems.len());
    for e in &elems {
        for i in 0..3 {
            // Σ_k M_e[i][k] v_k, exact for a linear velocity
            let mut mv = [0.0; 2];
            for kk in 0..3 {
                let w = local_mass(e.area, i, kk);
                let v = velocity[e.nodes[kk]];
                mv[0] += w * v[0];
                mv[1] += w * v[1];
            }
            for j in 0..3 {
                let val = mv[0] * e.grads[j][0] + mv[1] * e.grads[j][1];
                c.push(e.nodes[i], e.nodes[j], val);
            }
        }
    }
    Ok(c.build())
}
