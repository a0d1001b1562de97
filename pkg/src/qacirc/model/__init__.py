from .fixture import FixtureConfig, Layout, MemoryTable, Vocab, build_fixture
from .io import load_fixture, load_model, save_fixture, save_model
from .transformer import (
    ModelConfig,
    ModelWeights,
    RunTrace,
    TokenSeq,
    forward,
    greedy_generate,
    head_outputs,
    init_random,
    mlp_output,
    run,
)

__all__ = [
    "FixtureConfig", "Layout", "MemoryTable", "Vocab", "build_fixture",
    "load_fixture", "load_model", "save_fixture", "save_model",
    "ModelConfig", "ModelWeights", "RunTrace", "TokenSeq", "forward", "greedy_generate",
    "head_outputs", "init_random", "mlp_output", "run",
]
