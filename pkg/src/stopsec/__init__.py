"""Pseudonym watermarking over OFDM with a closed-loop interference database."""
from .ofdm import OfdmConfig, IqBlock, DataPayload, modulate_packet, demodulate_packet
from .frame import frame_encode, frame_decode, DecodeStatus, DecodeVerdict, generate_pseudonym
from .watermark import ChipCode, WatermarkScheme, SchemeKind, apply_watermark, get_code
from .channel import Fading, LinkModel, NoiseModel, propagate, add_noise
from .detector import DetectorConfig, PuDetector, run_detector
from .db import InterferenceDb, InterferenceReport, DbConfig
from .scenario import ScenarioConfig, SuConfig, run_scenario, default_config, load_config

__version__ = "0.1.0"
