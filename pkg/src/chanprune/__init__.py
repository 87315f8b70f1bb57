"""Structured channel pruning for small VGG-style CNNs, with a tiled-layout cost model."""
from .costmodel import (DeviceProfile, LayoutConfig, estimate_step_time, flop_count, padded_bytes,
                        padded_dim)
from .engine import (Hyperparams, TrainLog, evaluate, forward, grad_check, loss_and_grads,
                     sgd_momentum_step, train)
from .graph import (BatchNorm, Conv2D, Dense, Flatten, MaxPool, ModelGraph, ReLU, build_preset,
                    fingerprint, infer_shapes, param_count)
from .importance import ImportanceReport, PrunePlan, make_plan, score_bn_gamma, score_l1
from .modelfile import load, save
from .surgery import WeightPolicy, apply_plan, check_equivalence, consumer_map

__version__ = "0.1.0"
