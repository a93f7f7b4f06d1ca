//! Whole-component gradient verification: every differentiable building
//! block gets its tape gradient compared against central finite differences
//! over many random seeds. This is the first gate any change to the
//! autodiff core or a loss has to clear.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{cross_modal_decode, mlm_loss, msg_loss, pool_fused, DecodeMode, DecoderParams};
use crate::error::{invalid, Result};
use crate::loss::{cmm_binary_loss, co_id_loss, co_im_loss, info_nce, CmmHead, KeyMemory};
use crate::nn::{
    attention_pool, multi_head_attention, transformer_block, AttnMask, EmbeddingTables,
    ParamMode, TransformerBlockParams,
};
use crate::rng::sub_rng;
use crate::tensor::{grad_check, Tape, Tensor, Var};

/// Relative-error ceiling for a passing component at the default step.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
/// Central-difference step matching the tolerance above in 64-bit.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub components: Vec<ComponentReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed())
    }

    /// One line per component: name, worst relative error, verdict.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<24} seeds={:<3} max_rel_err={:.3e}  {}\n",
                c.name,
                c.seeds,
                c.max_error,
                if c.passed() { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

// ── Fixtures ────────────────────────────────────────────────────────────

const D: usize = 8;
const D_F: usize = 4;
const VOCAB: usize = 12;
const N_HEADS: usize = 2;

fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut row {
                *v /= norm;
            }
            Tensor::new(vec![1, d], row)
        })
        .collect()
}

fn rows_of(tape: &mut Tape, x: Var, n: usize) -> Vec<Var> {
    (0..n).map(|i| tape.slice_rows(x, i, i + 1)).collect()
}

/// One component: a display name plus a closure that, given a seed, builds
/// a random input tensor and a scalar-valued function of it.
struct Component {
    name: &'static str,
    check: Box<dyn Fn(u64) -> Result<f64>>,
}

fn check_fn<F>(build_case: F) -> Box<dyn Fn(u64) -> Result<f64>>
where
    F: Fn(ChaCha8Rng) -> (Tensor, Box<dyn Fn(&mut Tape, Var) -> Var>) + 'static,
{
    Box::new(move |seed| {
        let rng = sub_rng(seed, "gradcheck-case");
        let (x, f) = build_case(rng);
        grad_check(|tape, v| f(tape, v), &x, DEFAULT_STEP)
    })
}

fn components() -> Vec<Component> {
    let mut list = Vec::new();

    // FD is exact for a linear map up to rounding in the forward values, so
    // this anchors the harness itself. Weight magnitudes stay in [0.5, 1.5]
    // to keep the relative-error denominator away from zero.
    list.push(Component {
        name: "linear_map",
        check: check_fn(|mut rng| {
            let w_data: Vec<f64> = (0..4)
                .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let w = Tensor::new(vec![4, 1], w_data);
            let x_data: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![1, 4], x_data);
            (
                x,
                Box::new(move |tape, v| {
                    let wv = tape.input(&w);
                    let y = tape.matmul(v, wv);
                    tape.sum_all(y)
                }),
            )
        }),
    });

    list.push(Component {
        name: "softmax_cross_entropy",
        check: check_fn(|mut rng| {
            let x = Tensor::randn(vec![3, VOCAB], 1.5, &mut rng);
            (x, Box::new(|tape, v| tape.cross_entropy_rows(v, &[4, 0, 7])))
        }),
    });

    list.push(Component {
        name: "multi_head_attention",
        check: check_fn(|mut rng| {
            let block = TransformerBlockParams::init(D, N_HEADS, &mut rng);
            let x = Tensor::randn(vec![4, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let mask = AttnMask::full(4, 4);
                    let y = multi_head_attention(tape, v, v, &mask, &block.heads, ParamMode::Frozen)
                        .unwrap();
                    tape.sum_all(y)
                }),
            )
        }),
    });

    list.push(Component {
        name: "transformer_block",
        check: check_fn(|mut rng| {
            let block = TransformerBlockParams::init(D, N_HEADS, &mut rng);
            let x = Tensor::randn(vec![4, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let mask = AttnMask::full(4, 4);
                    let y = transformer_block(tape, v, &mask, &block, ParamMode::Frozen).unwrap();
                    tape.sum_all(y)
                }),
            )
        }),
    });

    list.push(Component {
        name: "attention_pooler",
        check: check_fn(|mut rng| {
            let pooler = crate::nn::AttentionPoolerParams::init(D, &mut rng);
            let x = Tensor::randn(vec![5, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let keep = [true, true, false, true, true];
                    let y = attention_pool(tape, v, &keep, &pooler, ParamMode::Frozen).unwrap();
                    tape.sum_all(y)
                }),
            )
        }),
    });

    // Embedded states through a block stack into the pooler: the whole
    // differentiable interior of an encoder in one chain.
    list.push(Component {
        name: "encoder_stack",
        check: check_fn(|mut rng| {
            let blocks: Vec<TransformerBlockParams> =
                (0..2).map(|_| TransformerBlockParams::init(D, N_HEADS, &mut rng)).collect();
            let pooler = crate::nn::AttentionPoolerParams::init(D, &mut rng);
            let x = Tensor::randn(vec![3, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let mask = AttnMask::full(3, 3);
                    let mut h = v;
                    for block in &blocks {
                        h = transformer_block(tape, h, &mask, block, ParamMode::Frozen).unwrap();
                    }
                    let pooled =
                        attention_pool(tape, h, &[true, true, true], &pooler, ParamMode::Frozen)
                            .unwrap();
                    tape.sum_all(pooled)
                }),
            )
        }),
    });

    list.push(Component {
        name: "info_nce",
        check: check_fn(|mut rng| {
            let keys = unit_rows(5, D, &mut rng);
            let q = Tensor::randn(vec![1, D], 1.0, &mut rng);
            (
                q,
                Box::new(move |tape, v| {
                    let negs: Vec<&[f64]> = keys[1..].iter().map(|k| k.data.as_slice()).collect();
                    info_nce(tape, v, &keys[0].data, &negs, 0.2).unwrap()
                }),
            )
        }),
    });

    list.push(Component {
        name: "co_im_composite",
        check: check_fn(|mut rng| {
            let k_v = unit_rows(2, D, &mut rng);
            let k_s = unit_rows(2, D, &mut rng);
            let mem_v = KeyMemory::seeded(4, D, &mut rng);
            let mem_s = KeyMemory::seeded(4, D, &mut rng);
            // Rows 0..2 are the video queries, rows 2..4 the sentence queries.
            let x = Tensor::randn(vec![4, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let qv = rows_of(tape, v, 2);
                    let qs: Vec<Var> = (2..4).map(|i| tape.slice_rows(v, i, i + 1)).collect();
                    co_im_loss(tape, &qv, &qs, &k_v, &k_s, &mem_v, &mem_s, 0.2).unwrap()
                }),
            )
        }),
    });

    list.push(Component {
        name: "co_id_composite",
        check: check_fn(|mut rng| {
            let k_v = unit_rows(2, D, &mut rng);
            let k_s = unit_rows(2, D, &mut rng);
            let mem_v = KeyMemory::seeded(4, D, &mut rng);
            let mem_s = KeyMemory::seeded(4, D, &mut rng);
            let x = Tensor::randn(vec![4, D], 1.0, &mut rng);
            (
                x,
                Box::new(move |tape, v| {
                    let qv = rows_of(tape, v, 2);
                    let qs: Vec<Var> = (2..4).map(|i| tape.slice_rows(v, i, i + 1)).collect();
                    co_id_loss(tape, &qv, &qs, &k_v, &k_s, &mem_v, &mem_s, 0.2).unwrap()
                }),
            )
        }),
    });

    list.push(Component {
        name: "mlm_head",
        check: check_fn(|mut rng| {
            let decoder = DecoderParams::init(D, VOCAB, 1, N_HEADS, &mut rng);
            let states = Tensor::randn(vec![5, D], 1.0, &mut rng);
            (
                states,
                Box::new(move |tape, v| {
                    mlm_loss(tape, &decoder, v, &[1, 3], &[0, 7, 5, 9, 1], ParamMode::Frozen)
                        .unwrap()
                }),
            )
        }),
    });

    list.push(Component {
        name: "msg_head",
        check: check_fn(|mut rng| {
            let decoder = DecoderParams::init(D, VOCAB, 1, N_HEADS, &mut rng);
            let tables = EmbeddingTables::init(VOCAB, 8, D_F, D, &mut rng);
            let h_video = Tensor::randn(vec![3, D], 1.0, &mut rng);
            (
                h_video,
                Box::new(move |tape, v| {
                    msg_loss(tape, &decoder, &tables, v, &[0, 6, 8, 1], ParamMode::Frozen).unwrap()
                }),
            )
        }),
    });

    list.push(Component {
        name: "fused_decoder_pool",
        check: check_fn(|mut rng| {
            let decoder = DecoderParams::init(D, VOCAB, 1, N_HEADS, &mut rng);
            let h_sentence = Tensor::randn(vec![4, D], 1.0, &mut rng);
            let h_video = Tensor::randn(vec![3, D], 1.0, &mut rng);
            (
                h_video,
                Box::new(move |tape, v| {
                    let s = tape.input(&h_sentence);
                    let fused = cross_modal_decode(
                        tape,
                        &decoder,
                        v,
                        s,
                        DecodeMode::Bidirectional,
                        ParamMode::Frozen,
                    )
                    .unwrap();
                    let pooled = pool_fused(tape, &decoder, fused, ParamMode::Frozen).unwrap();
                    tape.sum_all(pooled)
                }),
            )
        }),
    });

    list.push(Component {
        name: "cmm_head",
        check: check_fn(|mut rng| {
            let head = CmmHead::init(D, &mut rng);
            let matched = rng.gen_bool(0.5);
            let pooled = Tensor::randn(vec![1, D], 1.0, &mut rng);
            (
                pooled,
                Box::new(move |tape, v| cmm_binary_loss(tape, v, &head, matched, ParamMode::Frozen)),
            )
        }),
    });

    list
}

/// A deliberately non-smooth case: a rectifier evaluated exactly on its
/// kink, where central differences and the subgradient disagree by
/// construction. Exists so failure reporting itself stays tested.
fn failure_probe() -> Component {
    Component {
        name: "failure_probe",
        check: Box::new(|_seed| {
            let x = Tensor::new(vec![1, 3], vec![0.0, 1.0, -1.0]);
            grad_check(
                |tape, v| {
                    let r = tape.relu(v);
                    tape.sum_all(r)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
    }
}

// ── Suite driver ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub tolerance: f64,
    /// First seed probed; seeds run [seed_base, seed_base + seeds).
    pub seed_base: u64,
    /// Append the always-failing probe; used to verify that a failing
    /// component actually turns the run red.
    pub include_failure_probe: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            tolerance: DEFAULT_TOLERANCE,
            seed_base: 0,
            include_failure_probe: false,
        }
    }
}

pub fn run_suite(options: &SuiteOptions) -> Result<SuiteReport> {
    if options.seeds == 0 {
        return Err(invalid("gradient suite needs at least one seed"));
    }
    if !(options.tolerance > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut list = components();
    if options.include_failure_probe {
        list.push(failure_probe());
    }
    let mut reports = Vec::with_capacity(list.len());
    for component in &list {
        let mut worst = 0.0f64;
        for seed in options.seed_base..options.seed_base + options.seeds as u64 {
            let err = (component.check)(seed)?;
            if !err.is_finite() {
                worst = f64::INFINITY;
                break;
            }
            worst = worst.max(err);
        }
        reports.push(ComponentReport {
            name: component.name,
            seeds: options.seeds,
            max_error: worst,
            tolerance: options.tolerance,
        });
    }
    Ok(SuiteReport { components: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_at_default_settings() {
        let report = run_suite(&SuiteOptions::default()).unwrap();
        assert!(report.all_passed(), "\n{}", report.render());
        assert_eq!(report.components.len(), 13);
        for c in &report.components {
            assert_eq!(c.seeds, 20);
        }
    }

    #[test]
    fn linear_component_is_exact_to_fd() {
        let report = run_suite(&SuiteOptions { seeds: 5, ..Default::default() }).unwrap();
        let linear = report.components.iter().find(|c| c.name == "linear_map").unwrap();
        assert!(linear.max_error <= 1e-10, "linear map error {}", linear.max_error);
    }

    #[test]
    fn failure_probe_turns_the_run_red() {
        let report = run_suite(&SuiteOptions {
            seeds: 2,
            include_failure_probe: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!report.all_passed());
        let probe = report.components.iter().find(|c| c.name == "failure_probe").unwrap();
        assert!(!probe.passed());
        assert!(report.render().contains("FAIL"));
        // Everything real still passes alongside it.
        assert!(report.components.iter().filter(|c| c.name != "failure_probe").all(|c| c.passed()));
    }

    #[test]
    fn rejects_empty_seed_count() {
        assert!(run_suite(&SuiteOptions { seeds: 0, ..Default::default() }).is_err());
    }
}
