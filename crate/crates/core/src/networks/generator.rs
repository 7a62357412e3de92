use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Scalar, TensorError, Var};

use super::params::{init_from_specs, validate_against, Bound, Init, ParamSpec};
use super::{GrowthState, NetConfig, NetworkError, ParamSet, LEAKY_SLOPE};

const MAPPING_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T: Scalar = f32> {
    config: NetConfig,
    params: ParamSet<T>,
}

fn specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let z = cfg.latent_dim;
    let mut out = Vec::new();
    for i in 0..MAPPING_LAYERS {
        out.push(ParamSpec::new(
            format!("mapping.{i}.weight"),
            [z, z],
            Init::He { gain: 2.0, fan_in: z },
        ));
        out.push(ParamSpec::new(format!("mapping.{i}.bias"), [z], Init::Zeros));
    }
    let c0 = cfg.channels[0];
    out.push(ParamSpec::new("const", [1, c0, 4, 4], Init::StandardNormal));
    for s in 0..=cfg.max_stage {
        let cout = cfg.channels[s];
        let cin = if s == 0 { c0 } else { cfg.channels[s - 1] };
        for (j, inc) in [(1, cin), (2, cout)] {
            out.push(ParamSpec::new(
                format!("block{s}.conv{j}.weight"),
                [cout, inc, 3, 3],
                Init::He {
                    gain: 2.0,
                    fan_in: inc * 9,
                },
            ));
            out.push(ParamSpec::new(format!("block{s}.conv{j}.bias"), [cout], Init::Zeros));
            out.push(ParamSpec::new(
                format!("block{s}.style{j}.weight"),
                [z, 2 * cout],
                Init::He { gain: 1.0, fan_in: z },
            ));
            out.push(ParamSpec::new(
                format!("block{s}.style{j}.bias"),
                [2 * cout],
                Init::Zeros,
            ));
        }
        out.push(ParamSpec::new(
            format!("to_rgb{s}.weight"),
            [3, cout],
            Init::He {
                gain: 1.0,
                fan_in: cout,
            },
        ));
        out.push(ParamSpec::new(format!("to_rgb{s}.bias"), [3], Init::Zeros));
    }
    out
}

impl GeneratorParams<f32> {
    /// He-style initialization, fully determined by `seed`.
    pub fn init(seed: u64, config: &NetConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: config.clone(),
            params: init_from_specs(&specs(config), &mut rng),
        })
    }
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn from_params(config: &NetConfig, params: ParamSet<T>) -> Result<Self, NetworkError> {
        config.validate()?;
        validate_against(&params, &specs(config))?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Recovers the architecture from a parameter set's names and shapes.
    pub fn infer_config(params: &ParamSet<T>, embed_dim: usize) -> Result<NetConfig, NetworkError> {
        let latent_dim = params
            .get("mapping.0.weight")
            .ok_or_else(|| NetworkError::MissingParam("mapping.0.weight".into()))?
            .shape()[0];
        let channels: Vec<usize> = (0..)
            .map_while(|s| params.get(&format!("block{s}.conv1.weight")).map(|t| t.shape()[0]))
            .collect();
        if channels.is_empty() {
            return Err(NetworkError::MissingParam("block0.conv1.weight".into()));
        }
        let config = NetConfig {
            latent_dim,
            embed_dim,
            max_stage: channels.len() - 1,
            channels,
        };
        validate_against(params, &specs(&config))?;
        Ok(config)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds to vars recorded elsewhere, in parameter order.
    pub fn attach<'p>(&'p self, vars: &[Var]) -> Result<BoundGenerator<'p>, NetworkError> {
        Ok(BoundGenerator {
            config: &self.config,
            vars: self.params.attach(vars)?,
        })
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<T>, trainable: bool) -> BoundGenerator<'p> {
        BoundGenerator {
            config: &self.config,
            vars: self.params.bind(g, trainable),
        }
    }
}

/// Generator parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundGenerator<'p> {
    config: &'p NetConfig,
    vars: Bound<'p>,
}

impl BoundGenerator<'_> {
    pub fn bound(&self) -> &Bound<'_> {
        &self.vars
    }

    pub fn config(&self) -> &NetConfig {
        self.config
    }
}

fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound<'_>,
    prefix: &str,
    x: Var,
) -> Result<Var, NetworkError> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row_bias(y, b)?)
}

/// `z [b, latent] -> w [b, latent]`: pixel-normalized input followed by
/// three leaky dense layers.
pub fn mapping_forward<T: Scalar>(
    g: &mut Graph<T>,
    gen: &BoundGenerator<'_>,
    z: Var,
) -> Result<Var, NetworkError> {
    let dim = gen.config.latent_dim;
    if g.shape(z).len() != 2 || g.shape(z)[1] != dim {
        return Err(TensorError::ShapeMismatch {
            op: "mapping_forward",
            expected: vec![g.shape(z).first().copied().unwrap_or(0), dim],
            got: g.shape(z).to_vec(),
        }
        .into());
    }
    let mut x = g.pixel_norm(z)?;
    for i in 0..MAPPING_LAYERS {
        x = linear(g, &gen.vars, &format!("mapping.{i}"), x)?;
        x = g.leaky_relu(x, T::lit(LEAKY_SLOPE));
    }
    Ok(x)
}

fn styled_conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound<'_>,
    stage: usize,
    j: usize,
    x: Var,
    w: Var,
) -> Result<Var, NetworkError> {
    let weight = p.var(&format!("block{stage}.conv{j}.weight"))?;
    let bias = p.var(&format!("block{stage}.conv{j}.bias"))?;
    let x = g.conv2d(x, weight, bias)?;
    let style = linear(g, p, &format!("block{stage}.style{j}"), w)?;
    let x = g.modulate(x, style)?;
    let x = g.leaky_relu(x, T::lit(LEAKY_SLOPE));
    Ok(g.pixel_norm(x)?)
}

fn to_rgb<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_>, stage: usize, x: Var) -> Result<Var, NetworkError> {
    let w = p.var(&format!("to_rgb{stage}.weight"))?;
    let b = p.var(&format!("to_rgb{stage}.bias"))?;
    Ok(g.conv1x1(x, w, b)?)
}

/// `w [b, latent] -> images [b, 3, R, R]` in `[-1, 1]`, `R = 4 * 2^stage`.
pub fn synthesis_forward<T: Scalar>(
    g: &mut Graph<T>,
    gen: &BoundGenerator<'_>,
    w: Var,
    growth: GrowthState,
) -> Result<Var, NetworkError> {
    gen.config.check_stage(growth.stage)?;
    let batch = g.shape(w)[0];
    let p = &gen.vars;
    let constant = p.var("const")?;
    let mut x = g.repeat_rows(constant, batch)?;
    let mut prev = x;
    for s in 0..=growth.stage {
        prev = x;
        if s > 0 {
            x = g.upsample_nearest2x(x)?;
        }
        x = styled_conv(g, p, s, 1, x, w)?;
        x = styled_conv(g, p, s, 2, x, w)?;
    }
    let mut rgb = to_rgb(g, p, growth.stage, x)?;
    if growth.fading() {
        let old = to_rgb(g, p, growth.stage - 1, prev)?;
        let old = g.upsample_nearest2x(old)?;
        rgb = g.blend(rgb, old, T::lit(growth.alpha as f64))?;
    }
    Ok(g.tanh(rgb))
}

/// Mapping followed by synthesis.
pub fn generate<T: Scalar>(
    g: &mut Graph<T>,
    gen: &BoundGenerator<'_>,
    z: Var,
    growth: GrowthState,
) -> Result<Var, NetworkError> {
    let w = mapping_forward(g, gen, z)?;
    synthesis_forward(g, gen, w, growth)
}
