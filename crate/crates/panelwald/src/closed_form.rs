//! Closed-form covariance of the bivariate RI-CLPM.
//!
//! Stacking the per-wave vectors z_t = (x_t, y_t) gives
//!
//! ```text
//! Sigma = Gamma (J Sigma_eta J' + Sigma_u) Gamma'
//! ```
//!
//! with Gamma the lower block-Toeplitz matrix of powers of the AR/CL block Phi,
//! Sigma_u = blkdiag(Sigma_eps, I_{T-1} (x) Sigma_v), and J mapping the random
//! intercepts eta into the innovation space (wave 1 block Psi, later blocks
//! I - Phi, so that Gamma J reduces to a constant intercept contribution when
//! Psi = I). Variable order is wave-major, x before y.

use nalgebra::{DMatrix, Matrix2};

use crate::error::{Error, Result};
use crate::ram::ImpliedCovariance;

#[derive(Debug, Clone)]
pub struct RiclpmClosedForm {
    /// AR/CL block: row 0 is x_t on (x_{t-1}, y_{t-1}), row 1 is y_t.
    pub phi: Matrix2<f64>,
    /// Loading of the intercepts on the wave-1 observation (identity for the
    /// standard RI-CLPM).
    pub psi: Matrix2<f64>,
    /// Covariance of the random intercepts (eta_x, eta_y).
    pub sigma_eta: Matrix2<f64>,
    /// Covariance of the wave-1 within-person state.
    pub sigma_eps: Matrix2<f64>,
    /// Innovation covariance at waves 2..T.
    pub sigma_v: Matrix2<f64>,
    pub waves: usize,
}

impl RiclpmClosedForm {
    pub fn new(
        phi: Matrix2<f64>,
        sigma_eta: Matrix2<f64>,
        sigma_eps: Matrix2<f64>,
        sigma_v: Matrix2<f64>,
        waves: usize,
    ) -> Self {
        Self { phi, psi: Matrix2::identity(), sigma_eta, sigma_eps, sigma_v, waves }
    }

    pub fn spectral_radius(&self) -> f64 {
        let tr = self.phi.trace();
        let det = self.phi.determinant();
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            let s = disc.sqrt();
            (0.5 * (tr + s)).abs().max((0.5 * (tr - s)).abs())
        } else {
            det.abs().sqrt()
        }
    }

    /// 2T x 2T implied covariance of (x_1, y_1, ..., x_T, y_T).
    pub fn sigma(&self) -> Result<ImpliedCovariance> {
        let rho = self.spectral_radius();
        if rho >= 1.0 {
            return Err(Error::UnstableProcess(rho));
        }
        let t = self.waves;
        let dim = 2 * t;

        // Gamma: block row i, block col j holds Phi^(i-j) for j <= i.
        let mut powers = vec![Matrix2::identity()];
        for _ in 1..t {
            powers.push(self.phi * powers.last().unwrap());
        }
        let mut gamma = DMatrix::zeros(dim, dim);
        for i in 0..t {
            for j in 0..=i {
                set_block(&mut gamma, i, j, &powers[i - j]);
            }
        }

        // J: wave-1 block Psi, later blocks I - Phi.
        let mut jmat = DMatrix::zeros(dim, 2);
        set_block(&mut jmat, 0, 0, &self.psi);
        let later = Matrix2::identity() - self.phi;
        for i in 1..t {
            set_block(&mut jmat, i, 0, &later);
        }

        let mut sigma_u = DMatrix::zeros(dim, dim);
        set_block(&mut sigma_u, 0, 0, &self.sigma_eps);
        for i in 1..t {
            set_block(&mut sigma_u, i, i, &self.sigma_v);
        }

        let eta = DMatrix::from_column_slice(2, 2, self.sigma_eta.as_slice());
        let core = &jmat * eta * jmat.transpose() + sigma_u;
        let sigma = &gamma * core * gamma.transpose();
        let sigma = 0.5 * (&sigma + sigma.transpose());
        let (logdet, is_pd) = match sigma.clone().cholesky() {
            Some(ch) => (2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(), true),
            None => (f64::NAN, false),
        };
        Ok(ImpliedCovariance { sigma, logdet, is_pd })
    }

    /// Fully fixed model text for the equivalent RAM system (requires Psi = I).
    /// Observed order matches the closed form: wave-major, x before y.
    pub fn to_model_text(&self) -> String {
        assert_eq!(self.psi, Matrix2::identity(), "RAM equivalence requires Psi = I");
        let t = self.waves;
        let mut s = String::from("@between: BX BY\n");
        for w in 1..=t {
            s.push_str(&format!("WFX{w} =~ 1*x{w}\nWFY{w} =~ 1*y{w}\n"));
        }
        let bx: Vec<String> = (1..=t).map(|w| format!("1*x{w}")).collect();
        let by: Vec<String> = (1..=t).map(|w| format!("1*y{w}")).collect();
        s.push_str(&format!("BX =~ {}\nBY =~ {}\n", bx.join(" + "), by.join(" + ")));
        for w in 2..=t {
            let p = w - 1;
            s.push_str(&format!(
                "WFX{w} ~ {}*WFX{p} + {}*WFY{p}\nWFY{w} ~ {}*WFX{p} + {}*WFY{p}\n",
                self.phi[(0, 0)],
                self.phi[(0, 1)],
                self.phi[(1, 0)],
                self.phi[(1, 1)]
            ));
        }
        s.push_str(&format!(
            "BX ~~ {}*BX\nBY ~~ {}*BY\nBX ~~ {}*BY\n",
            self.sigma_eta[(0, 0)],
            self.sigma_eta[(1, 1)],
            self.sigma_eta[(0, 1)]
        ));
        s.push_str(&format!(
            "WFX1 ~~ {}*WFX1\nWFY1 ~~ {}*WFY1\nWFX1 ~~ {}*WFY1\n",
            self.sigma_eps[(0, 0)],
            self.sigma_eps[(1, 1)],
            self.sigma_eps[(0, 1)]
        ));
        for w in 2..=t {
            s.push_str(&format!(
                "WFX{w} ~~ {}*WFX{w}\nWFY{w} ~~ {}*WFY{w}\nWFX{w} ~~ {}*WFY{w}\n",
                self.sigma_v[(0, 0)],
                self.sigma_v[(1, 1)],
                self.sigma_v[(0, 1)]
            ));
        }
        for w in 1..=t {
            s.push_str(&format!("x{w} ~~ 0*x{w}\ny{w} ~~ 0*y{w}\n"));
        }
        s
    }
}

fn set_block(m: &mut DMatrix<f64>, bi: usize, bj: usize, block: &Matrix2<f64>) {
    for r in 0..2 {
        for c in 0..2 {
            m[(2 * bi + r, 2 * bj + c)] = block[(r, c)];
        }
    }
}
