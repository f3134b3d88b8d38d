//! Architecture strings: `[ predictor-layers ]xN -> classifier-layers`.
//!
//! The bracketed part describes one geometric predictor and `N` is how many
//! warp operations the cascade performs; the part after the arrow is the
//! classifier. Either part may be absent: a bare token list is a plain CNN,
//! and a bracketed spec without an arrow is an alignment-only network.
//! Tokens are `conv(KxK, C)`, `FC(n)`, and `P` (2x2 max-pool); the unicode
//! glyphs for the multiplication sign and the arrow are accepted.

use crate::error::{Error, Result};
use crate::warp::WarpFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerToken {
    Conv { k: usize, out_c: usize },
    Fc { out: usize },
    Pool,
}

impl std::fmt::Display for LayerToken {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerToken::Conv { k, out_c } => write!(f, "conv({k}x{k},{out_c})"),
            LayerToken::Fc { out } => write!(f, "FC({out})"),
            LayerToken::Pool => write!(f, "P"),
        }
    }
}

/// How the warp cascade is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No geometric predictor at all.
    CnnOnly,
    /// Chained transformer(s): each step resamples the previous OUTPUT
    /// image, discarding geometry.
    Stn,
    /// Compositional: warp parameters flow through the cascade, every step
    /// resamples the original source; one predictor per step.
    Cstn,
    /// Compositional with a single recurrent predictor shared by all steps.
    Icstn,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Variant::CnnOnly),
            "stn" => Ok(Variant::Stn),
            "cstn" => Ok(Variant::Cstn),
            "icstn" => Ok(Variant::Icstn),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::CnnOnly => "cnn",
            Variant::Stn => "stn",
            Variant::Cstn => "cstn",
            Variant::Icstn => "icstn",
        }
    }
}

/// Raw grammar parse: token lists plus the warp-op count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchParts {
    pub predictor: Vec<LayerToken>,
    pub warp_ops: usize,
    pub classifier: Vec<LayerToken>,
    pub has_predictor: bool,
}

fn split_tokens(s: &str) -> Vec<&str> {
    // Split on '-' at paren depth 0 only; conv(..) args contain commas, not
    // dashes, so depth tracking is all that's needed.
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            '-' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn parse_token(tok: &str, index: usize) -> Result<LayerToken> {
    if tok == "P" {
        return Ok(LayerToken::Pool);
    }
    if let Some(rest) = tok.strip_prefix("FC(").and_then(|r| r.strip_suffix(')')) {
        let out: usize = rest
            .parse()
            .map_err(|_| Error::Config(format!("token {index}: bad FC width {rest:?}")))?;
        if out == 0 {
            return Err(Error::Config(format!("token {index}: FC width must be > 0")));
        }
        return Ok(LayerToken::Fc { out });
    }
    if let Some(rest) = tok.strip_prefix("conv(").and_then(|r| r.strip_suffix(')')) {
        let (kernel, channels) = rest
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("token {index}: conv needs 'KxK,C'")))?;
        let (k1, k2) = kernel
            .split_once('x')
            .ok_or_else(|| Error::Config(format!("token {index}: conv kernel needs 'KxK'")))?;
        let k1: usize = k1
            .parse()
            .map_err(|_| Error::Config(format!("token {index}: bad kernel size {k1:?}")))?;
        let k2: usize = k2
            .parse()
            .map_err(|_| Error::Config(format!("token {index}: bad kernel size {k2:?}")))?;
        if k1 != k2 {
            return Err(Error::Config(format!(
                "token {index}: only square kernels supported, got {k1}x{k2}"
            )));
        }
        let out_c: usize = channels
            .parse()
            .map_err(|_| Error::Config(format!("token {index}: bad channel count {channels:?}")))?;
        if k1 == 0 || out_c == 0 {
            return Err(Error::Config(format!(
                "token {index}: conv kernel and channels must be > 0"
            )));
        }
        return Ok(LayerToken::Conv { k: k1, out_c });
    }
    Err(Error::Config(format!("token {index}: unrecognized {tok:?}")))
}

fn parse_layer_list(s: &str) -> Result<Vec<LayerToken>> {
    if s.is_empty() {
        return Err(Error::Config("empty layer list".into()));
    }
    split_tokens(s)
        .iter()
        .enumerate()
        .map(|(i, t)| parse_token(t, i))
        .collect()
}

/// Parse an architecture string into its parts (grammar only; shape checks
/// happen in [`NetworkSpec::build`]).
pub fn parse_arch(text: &str) -> Result<ArchParts> {
    let normalized: String = text
        .replace('\u{00d7}', "x") // multiplication sign
        .replace('\u{2192}', "->") // arrow
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect();
    if normalized.is_empty() {
        return Err(Error::Config("empty architecture string".into()));
    }
    if let Some(rest) = normalized.strip_prefix('[') {
        let close = rest
            .find(']')
            .ok_or_else(|| Error::Config("unclosed '[' in architecture".into()))?;
        let predictor = parse_layer_list(&rest[..close])?;
        let tail = &rest[close + 1..];
        let tail = tail
            .strip_prefix('x')
            .ok_or_else(|| Error::Config("expected 'xN' after ']'".into()))?;
        let digits_end = tail
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(tail.len());
        let warp_ops: usize = tail[..digits_end]
            .parse()
            .map_err(|_| Error::Config("expected a warp-op count after 'x'".into()))?;
        if warp_ops == 0 {
            return Err(Error::Config("warp-op count must be >= 1".into()));
        }
        let rest = &tail[digits_end..];
        let classifier = if rest.is_empty() {
            Vec::new()
        } else {
            let body = rest
                .strip_prefix("->")
                .ok_or_else(|| Error::Config(format!("expected '->' before {rest:?}")))?;
            parse_layer_list(body)?
        };
        Ok(ArchParts {
            predictor,
            warp_ops,
            classifier,
            has_predictor: true,
        })
    } else {
        Ok(ArchParts {
            predictor: Vec::new(),
            warp_ops: 0,
            classifier: parse_layer_list(&normalized)?,
            has_predictor: false,
        })
    }
}

/// Tensor shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeState {
    Map { c: usize, h: usize, w: usize },
    Flat { n: usize },
}

impl ShapeState {
    pub fn features(self) -> usize {
        match self {
            ShapeState::Map { c, h, w } => c * h * w,
            ShapeState::Flat { n } => n,
        }
    }
}

/// One validated layer with its resolved input/output shapes.
#[derive(Debug, Clone, Copy)]
pub struct LayerPlan {
    pub token: LayerToken,
    pub input: ShapeState,
    pub output: ShapeState,
}

impl LayerPlan {
    pub fn param_count(&self) -> usize {
        match (self.token, self.input) {
            (LayerToken::Conv { k, out_c }, ShapeState::Map { c, .. }) => out_c * (c * k * k + 1),
            (LayerToken::Fc { out }, input) => out * (input.features() + 1),
            (LayerToken::Pool, _) => 0,
            (LayerToken::Conv { .. }, ShapeState::Flat { .. }) => unreachable!("validated"),
        }
    }
}

/// Walk a token list through shape arithmetic from `input`.
pub fn plan_layers(tokens: &[LayerToken], input: ShapeState) -> Result<Vec<LayerPlan>> {
    let mut plans = Vec::with_capacity(tokens.len());
    let mut state = input;
    for (i, &token) in tokens.iter().enumerate() {
        let output = match (token, state) {
            (LayerToken::Conv { k, out_c }, ShapeState::Map { c: _, h, w }) => {
                if k > h || k > w {
                    return Err(Error::Config(format!(
                        "layer {i} ({token}): kernel exceeds input extent {h}x{w}"
                    )));
                }
                ShapeState::Map {
                    c: out_c,
                    h: h - k + 1,
                    w: w - k + 1,
                }
            }
            (LayerToken::Conv { .. }, ShapeState::Flat { n }) => {
                return Err(Error::Config(format!(
                    "layer {i} ({token}): conv after FC (input already flat, {n} features)"
                )));
            }
            (LayerToken::Pool, ShapeState::Map { c, h, w }) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Config(format!(
                        "layer {i} (P): pooling odd extents {h}x{w}"
                    )));
                }
                ShapeState::Map {
                    c,
                    h: h / 2,
                    w: w / 2,
                }
            }
            (LayerToken::Pool, ShapeState::Flat { n }) => {
                return Err(Error::Config(format!(
                    "layer {i} (P): pool after FC (input already flat, {n} features)"
                )));
            }
            (LayerToken::Fc { out }, input) => ShapeState::Flat {
                n: {
                    let _ = input.features();
                    out
                },
            },
        };
        plans.push(LayerPlan {
            token,
            input: state,
            output,
        });
        state = output;
    }
    Ok(plans)
}

/// Fully validated network description: grammar, variant wiring, and shape
/// arithmetic against a concrete input size.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub text: String,
    pub variant: Variant,
    pub family: WarpFamily,
    /// `(C, H, W)` of the view fed to both predictor and classifier.
    pub input: (usize, usize, usize),
    pub predictor: Vec<LayerPlan>,
    pub warp_ops: usize,
    /// True when all warp steps reference one predictor instance.
    pub shared: bool,
    pub classifier: Vec<LayerPlan>,
}

impl NetworkSpec {
    pub fn build(
        text: &str,
        variant: Variant,
        family: WarpFamily,
        input: (usize, usize, usize),
    ) -> Result<NetworkSpec> {
        let parts = parse_arch(text)?;
        let (c, h, w) = input;
        let map_in = ShapeState::Map { c, h, w };

        if variant == Variant::CnnOnly {
            if parts.has_predictor {
                return Err(Error::Config(
                    "cnn variant takes a bare layer list, not a [..]xN spec".into(),
                ));
            }
        } else if !parts.has_predictor {
            return Err(Error::Config(format!(
                "{} variant needs a [..]xN predictor part",
                variant.name()
            )));
        }

        let predictor = plan_layers(&parts.predictor, map_in)?;
        if variant != Variant::CnnOnly {
            match predictor.last().map(|p| p.token) {
                Some(LayerToken::Fc { out }) if out == family.dof() => {}
                other => {
                    return Err(Error::Config(format!(
                        "predictor must end with FC({}) for the {} family, found {:?}",
                        family.dof(),
                        family.name(),
                        other.map(|t| t.to_string())
                    )));
                }
            }
        }
        let classifier = plan_layers(&parts.classifier, map_in)?;
        if !parts.classifier.is_empty() {
            match parts.classifier.last() {
                Some(LayerToken::Fc { .. }) => {}
                other => {
                    return Err(Error::Config(format!(
                        "classifier must end with an FC layer, found {other:?}"
                    )));
                }
            }
        }

        Ok(NetworkSpec {
            text: text.trim().to_string(),
            variant,
            family,
            input,
            predictor,
            warp_ops: parts.warp_ops,
            shared: variant == Variant::Icstn,
            classifier,
        })
    }

    /// Class count, if a classifier is present.
    pub fn n_classes(&self) -> Option<usize> {
        self.classifier.last().map(|p| p.output.features())
    }

    /// Exact learnable-parameter count; a shared predictor is counted once.
    pub fn count_params(&self) -> usize {
        let pred: usize = self.predictor.iter().map(|p| p.param_count()).sum();
        let copies = if self.predictor.is_empty() {
            0
        } else if self.shared {
            1
        } else {
            self.warp_ops
        };
        let cls: usize = self.classifier.iter().map(|p| p.param_count()).sum();
        pred * copies + cls
    }
}
