//! Flat `key=value` configuration. Every key has a default; unknown keys are
//! rejected. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

macro_rules! config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr, $key:literal; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = value.trim().parse::<$ty>().map_err(|e| Error::Config {
                            key: key.to_string(),
                            msg: format!("cannot parse `{value}`: {e}"),
                        })?;
                    } )*
                    _ => {
                        return Err(Error::Config {
                            key: key.to_string(),
                            msg: "unknown key".into(),
                        })
                    }
                }
                Ok(())
            }

            /// Canonical text form: every key, fixed order.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( writeln!(s, "{}={}", $key, self.$field).expect("string write"); )*
                s
            }
        }
    };
}

config! {
    /// Common latent dimension `d` after input projection.
    latent_dim: usize = 64, "latent_dim";
    /// Output width of the shared and private fusion layers.
    branch_dim: usize = 64, "branch_dim";
    alpha: f64 = 0.4, "alpha";
    gamma1: f64 = 0.3, "gamma1";
    gamma2: f64 = 0.3, "gamma2";
    triplets_per_anchor: usize = 2, "triplets_per_anchor";

    window_k: usize = 5, "window_k";
    tau_low: f64 = 1.0, "tau_low";
    tau_high: f64 = 1.0, "tau_high";
    nce_temperature: f64 = 0.5, "nce_temperature";
    proj_dim: usize = 32, "proj_dim";

    w_same: usize = 3, "w_same";
    w_cross: usize = 1, "w_cross";
    jacobi_alpha: f64 = 0.0, "jacobi_alpha";
    jacobi_beta: f64 = 0.0, "jacobi_beta";
    jacobi_order_r: usize = 3, "jacobi_order_R";
    beta_cons: f64 = 0.1, "beta_cons";
    /// Largest matrix handed to the dense eigensolver.
    eig_cap: usize = 1500, "eig_cap";

    d_fusion: usize = 64, "d_fusion";
    n_heads: usize = 2, "n_heads";
    n_layers: usize = 2, "n_layers";
    lambda1: f64 = 1.0, "lambda1";
    lambda2: f64 = 0.1, "lambda2";
    lambda3: f64 = 1.0, "lambda3";

    steps: usize = 300, "steps";
    lr: f64 = 1e-3, "lr";
    seed: u64 = 0, "seed";
    adam_beta1: f64 = 0.9, "adam_beta1";
    adam_beta2: f64 = 0.999, "adam_beta2";
    adam_eps: f64 = 1e-8, "adam_eps";
    train_frac: f64 = 0.75, "train_frac";

    disable_decoupler: bool = false, "disable_decoupler";
    disable_shared_branch: bool = false, "disable_shared_branch";
    disable_private_branch: bool = false, "disable_private_branch";
    disable_transformer_fusion: bool = false, "disable_transformer_fusion";

    synth_conversations: usize = 8, "synth_conversations";
    synth_max_len: usize = 6, "synth_max_len";
    synth_classes: usize = 4, "synth_classes";
    synth_speakers: usize = 2, "synth_speakers";
    synth_dim_t: usize = 16, "synth_dim_t";
    synth_dim_a: usize = 12, "synth_dim_a";
    synth_dim_v: usize = 12, "synth_dim_v";

    gradcheck_samples: usize = 256, "gradcheck_samples";
    gradcheck_h: f64 = 1e-6, "gradcheck_h";
}

/// The four removable components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Decoupler,
    SharedBranch,
    PrivateBranch,
    TransformerFusion,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Decoupler,
        Ablation::SharedBranch,
        Ablation::PrivateBranch,
        Ablation::TransformerFusion,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Decoupler => "disable_decoupler",
            Ablation::SharedBranch => "disable_shared_branch",
            Ablation::PrivateBranch => "disable_private_branch",
            Ablation::TransformerFusion => "disable_transformer_fusion",
        }
    }

    /// Accepts the config key or its short form (`decoupler`, `shared_branch`, ...).
    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.key() == name || a.key().trim_start_matches("disable_") == name)
            .ok_or_else(|| Error::Ablation(format!("unknown flag `{name}`")))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: format!("line {}: expected key=value", n + 1),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn is_ablated(&self, a: Ablation) -> bool {
        match a {
            Ablation::Decoupler => self.disable_decoupler,
            Ablation::SharedBranch => self.disable_shared_branch,
            Ablation::PrivateBranch => self.disable_private_branch,
            Ablation::TransformerFusion => self.disable_transformer_fusion,
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::Decoupler => self.disable_decoupler = true,
            Ablation::SharedBranch => self.disable_shared_branch = true,
            Ablation::PrivateBranch => self.disable_private_branch = true,
            Ablation::TransformerFusion => self.disable_transformer_fusion = true,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        let ablated = Ablation::ALL.iter().filter(|a| self.is_ablated(**a)).count();
        if ablated == 4 {
            return Err(Error::Ablation("all four components disabled; no path to logits".into()));
        }
        for (key, v) in [
            ("latent_dim", self.latent_dim),
            ("branch_dim", self.branch_dim),
            ("window_k", self.window_k),
            ("proj_dim", self.proj_dim),
            ("jacobi_order_R", self.jacobi_order_r),
            ("d_fusion", self.d_fusion),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1");
            }
        }
        if self.d_fusion % self.n_heads != 0 {
            return bad("n_heads", "must divide d_fusion");
        }
        for (key, v) in [
            ("tau_low", self.tau_low),
            ("tau_high", self.tau_high),
            ("nce_temperature", self.nce_temperature),
            ("alpha", self.alpha),
            ("lr", self.lr),
            ("gradcheck_h", self.gradcheck_h),
        ] {
            if !(v > 0.0) {
                return bad(key, "must be positive");
            }
        }
        for (key, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("beta_cons", self.beta_cons),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return bad(key, "must be nonnegative");
            }
        }
        if !(self.jacobi_alpha > -1.0) {
            return bad("jacobi_alpha", "must exceed -1");
        }
        if !(self.jacobi_beta > -1.0) {
            return bad("jacobi_beta", "must exceed -1");
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad("train_frac", "must lie in (0, 1)");
        }
        Ok(())
    }
}
