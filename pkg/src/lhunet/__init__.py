"""Lightweight hybrid CNN/attention network for volumetric segmentation."""

from .archconfig import (ArchSpec, AttentionSchedule, ConfigError, ScheduleParseError, TrainSpec,
                         load_config, parse_schedule, preset, render_schedule, validate)
from .analyzer import CostReport, analyze, compare, count_params, estimate_flops
from .network import LhuNet, build, load, save
from .inference import dsc, evaluate, hd95, plan_windows, sliding_window_predict
from .dataio import PhantomSpec, VolumeRecord, make_phantom, read_volume, write_volume
from .trainloop import dice_ce_loss, poly_lr, sgd_step, train

__version__ = "0.1.0"
