use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Scalar, Var};

use super::params::{init_from_specs, validate_against, Bound, Init, ParamSpec};
use super::{resolution, GrowthState, NetConfig, NetworkError, ParamSet, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<T: Scalar = f32> {
    config: NetConfig,
    params: ParamSet<T>,
}

fn he(gain: f64, fan_in: usize) -> Init {
    Init::He { gain, fan_in }
}

fn specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let ch = &cfg.channels;
    let mut out = Vec::new();
    for (s, &c) in ch.iter().enumerate().take(cfg.max_stage + 1) {
        out.push(ParamSpec::new(format!("from_rgb{s}.weight"), [c, 3], he(2.0, 3)));
        out.push(ParamSpec::new(format!("from_rgb{s}.bias"), [c], Init::Zeros));
    }
    for s in 1..=cfg.max_stage {
        out.push(ParamSpec::new(
            format!("block{s}.conv1.weight"),
            [ch[s], ch[s], 3, 3],
            he(2.0, ch[s] * 9),
        ));
        out.push(ParamSpec::new(format!("block{s}.conv1.bias"), [ch[s]], Init::Zeros));
        out.push(ParamSpec::new(
            format!("block{s}.conv2.weight"),
            [ch[s - 1], ch[s], 3, 3],
            he(2.0, ch[s] * 9),
        ));
        out.push(ParamSpec::new(format!("block{s}.conv2.bias"), [ch[s - 1]], Init::Zeros));
    }
    let c0 = ch[0];
    out.push(ParamSpec::new("block0.conv.weight", [c0, c0, 3, 3], he(2.0, c0 * 9)));
    out.push(ParamSpec::new("block0.conv.bias", [c0], Init::Zeros));
    let flat = c0 * 16;
    out.push(ParamSpec::new("embed.weight", [flat, cfg.embed_dim], he(2.0, flat)));
    out.push(ParamSpec::new("embed.bias", [cfg.embed_dim], Init::Zeros));
    out.push(ParamSpec::new("logit.weight", [cfg.embed_dim, 1], he(1.0, cfg.embed_dim)));
    out.push(ParamSpec::new("logit.bias", [1], Init::Zeros));
    out
}

impl DiscriminatorParams<f32> {
    pub fn init(seed: u64, config: &NetConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config: config.clone(),
            params: init_from_specs(&specs(config), &mut rng),
        })
    }
}

impl<T: Scalar> DiscriminatorParams<T> {
    pub fn from_params(config: &NetConfig, params: ParamSet<T>) -> Result<Self, NetworkError> {
        config.validate()?;
        validate_against(&params, &specs(config))?;
        Ok(Self {
            config: config.clone(),
            params,
        })
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

    pub fn cast<U: Scalar>(&self) -> DiscriminatorParams<U> {
        DiscriminatorParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds to vars recorded elsewhere, in parameter order.
    pub fn attach<'p>(&'p self, vars: &[Var]) -> Result<BoundDiscriminator<'p>, NetworkError> {
        Ok(BoundDiscriminator {
            config: &self.config,
            vars: self.params.attach(vars)?,
        })
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<T>, trainable: bool) -> BoundDiscriminator<'p> {
        BoundDiscriminator {
            config: &self.config,
            vars: self.params.bind(g, trainable),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundDiscriminator<'p> {
    config: &'p NetConfig,
    vars: Bound<'p>,
}

impl BoundDiscriminator<'_> {
    pub fn bound(&self) -> &Bound<'_> {
        &self.vars
    }
}

fn leaky<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::lit(LEAKY_SLOPE))
}

fn from_rgb<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_>, stage: usize, img: Var) -> Result<Var, NetworkError> {
    let w = p.var(&format!("from_rgb{stage}.weight"))?;
    let b = p.var(&format!("from_rgb{stage}.bias"))?;
    let x = g.conv1x1(img, w, b)?;
    Ok(leaky(g, x))
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var, NetworkError> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let x = g.conv2d(x, w, b)?;
    Ok(leaky(g, x))
}

/// Two convs then 2x average-pool, `[b, ch[s], R, R] -> [b, ch[s-1], R/2, R/2]`.
fn down_block<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_>, stage: usize, x: Var) -> Result<Var, NetworkError> {
    let x = conv(g, p, &format!("block{stage}.conv1"), x)?;
    let x = conv(g, p, &format!("block{stage}.conv2"), x)?;
    Ok(g.avgpool2x(x)?)
}

/// Returns `(logit [b, 1], embedding [b, embed_dim])`. The embedding is the
/// leaky activation of the dense layer that feeds the logit.
pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    disc: &BoundDiscriminator<'_>,
    images: Var,
    growth: GrowthState,
) -> Result<(Var, Var), NetworkError> {
    disc.config.check_stage(growth.stage)?;
    let res = resolution(growth.stage);
    let shape = g.shape(images);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != res || shape[3] != res {
        return Err(NetworkError::ResolutionMismatch {
            expected: res,
            got: shape.to_vec(),
        });
    }
    let batch = shape[0];
    let p = &disc.vars;

    let mut x = from_rgb(g, p, growth.stage, images)?;
    if growth.stage > 0 {
        x = down_block(g, p, growth.stage, x)?;
        if growth.fading() {
            let small = g.avgpool2x(images)?;
            let old = from_rgb(g, p, growth.stage - 1, small)?;
            x = g.blend(x, old, T::lit(growth.alpha as f64))?;
        }
        for s in (1..growth.stage).rev() {
            x = down_block(g, p, s, x)?;
        }
    }
    let x = conv(g, p, "block0.conv", x)?;
    let flat = g.reshape(x, [batch, disc.config.channels[0] * 16])?;
    let ew = p.var("embed.weight")?;
    let eb = p.var("embed.bias")?;
    let e = g.matmul(flat, ew)?;
    let e = g.add_row_bias(e, eb)?;
    let embedding = leaky(g, e);
    let lw = p.var("logit.weight")?;
    let lb = p.var("logit.bias")?;
    let logit = g.matmul(embedding, lw)?;
    let logit = g.add_row_bias(logit, lb)?;
    Ok((logit, embedding))
}
