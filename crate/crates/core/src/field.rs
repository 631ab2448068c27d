//! Dense scalar fields on the polar grid, row-major with radius outer.

/// Nodal values F[i_r * nb + j_b].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nr: usize,
    pub nb: usize,
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(nr: usize, nb: usize) -> ScalarField {
        ScalarField { nr, nb, data: vec![0.0; nr * nb] }
    }

    pub fn from_nodes(r_nodes: &[f64], b_nodes: &[f64], f: impl Fn(f64, f64) -> f64) -> ScalarField {
        let (nr, nb) = (r_nodes.len(), b_nodes.len());
        let mut data = Vec::with_capacity(nr * nb);
        for &r in r_nodes {
            for &b in b_nodes {
                data.push(f(r, b));
            }
        }
        ScalarField { nr, nb, data }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nr && j < self.nb);
        i * self.nb + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.nb + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    /// Radial profile at fixed angular index.
    pub fn radial_slice(&self, j: usize) -> Vec<f64> {
        (0..self.nr).map(|i| self.get(i, j)).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.nb..(i + 1) * self.nb]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { nr: self.nr, nb: self.nb, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        assert_eq!((self.nr, self.nb), (other.nr, other.nb));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        ScalarField { nr: self.nr, nb: self.nb, data }
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &ScalarField) {
        assert_eq!((self.nr, self.nb), (other.nr, other.nb));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
