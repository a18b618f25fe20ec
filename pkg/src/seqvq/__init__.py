"""Communication-efficient multi-device Transformer inference, desk scale.

Sequence-sharded execution where devices exchange vector-quantization
indices instead of activations, attention mixes full-precision local keys
and values with dequantized foreign ones, training regularizes the
quantization gap with residual-calibrated noise, and every device carries
its own class-token replica.  Ships with an exact bit-accounting ledger, an
analytical latency model, and numerical verification of the two supporting
distributional claims.
"""

from .attention import (MixedPrecisionMask, build_mask, mixed_precision_attention,
                        multihead_attention, softmax_perturbation_first_order,
                        standard_attention)
from .cluster import (LEDGER_COLUMNS, CommsLedger, InferenceResult, ShardPlan,
                      partition_tokens, run_inference)
from .comms import (BENCH_COLUMNS, METHODS, CommsConfig, LatencyReport, MethodSpec,
                    bench_csv, bits_per_token, breakdown_long_csv,
                    calibrate_seconds_per_flop, comm_time, comm_time_exact,
                    compression_ratio, compute_time, latency_breakdown, speedup,
                    speedup_table)
from .config import DEFAULTS, SCHEMA_VERSION, config_digest, load_config
from .errors import (ConfigError, IndexCorruptionError, LifecycleError, MaskError,
                     ModeError, PlanError, ProtocolError, ShapeError)
from .model import (ModelConfig, ModelParams, classify, generate, init_params,
                    lm_logits, lm_loss, load_checkpoint, save_checkpoint)
from .rng import generator, keyed_normal
from .tensor import Tape, Tensor, constant, grad_check
from .theorems import (GaussianSpec, Theorem1Report, Theorem2Report, jacobi_eigh,
                       mc_variance_reduction, variance_bound_check,
                       variance_bound_constants, verify_theorem1, verify_theorem2,
                       w2_gaussian_sq)
from .train import (ABLATION_COLUMNS, AblationSettings, TrainConfig, ablation_csv,
                    evaluate_classifier, evaluate_lm, initialize_codebooks,
                    make_classify_data, make_lm_data, run_ablation,
                    summarize_ablation, train, train_step)
from .vq import (Codebook, NoiseConfig, QuantizedTokens, ResidualStats, dequantize,
                 ema_update, index_bits, kmeans_init, load_codebook, quantize,
                 save_codebook)

__version__ = "0.1.0"
