from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import Field
from pydantic_settings import BaseSettings


class AudioConfig(BaseSettings):
    # analysis parameters shared by corpus, features and recognizer
    sample_rate: int = Field(22050)
    n_fft: int = Field(1024)
    win_length: int = Field(1024)
    hop_length: int = Field(256)
    n_mels: int = Field(80)
    fmin: float = Field(0.0)
    fmax: float = Field(8000.0)
    log_floor: float = Field(1e-5, gt=0.0)

    f0_min: float = Field(50.0)
    f0_max: float = Field(600.0)
    voicing_threshold: float = Field(0.3, ge=0.0, le=1.0)

    model_config = {"extra": "ignore"}


class ModelConfig(BaseSettings):
    # toy-scale widths, the block counts follow the architecture
    n_mels: int = Field(80)
    d_hidden: int = Field(128)
    d_style: int = Field(128)
    n_heads: int = Field(2)
    ffn_kernel: int = Field(9)
    ffn_inner: int = Field(256)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)

    text_layers: int = Field(4)
    generator_layers: int = Field(2)
    style_conv_layers: int = Field(2)
    style_attn_layers: int = Field(2)

    predictor_filter: int = Field(128)
    predictor_kernel: int = Field(3)

    aligner_dim: int = Field(80)
    aligner_temperature: float = Field(5e-4, gt=0.0)

    unet_base: int = Field(32)
    unet_mults: Tuple[int, ...] = Field((1, 2, 2))
    time_emb_dim: int = Field(128)

    max_positions: int = Field(2000)

    use_ef_generators: bool = Field(True)
    use_energy: bool = Field(True)

    model_config = {"extra": "ignore"}


class DiffusionConfig(BaseSettings):
    # linear noise schedule and default sampler settings
    beta0: float = Field(0.05, gt=0.0)
    beta1: float = Field(20.0, gt=0.0)
    t_min: float = Field(1e-5, gt=0.0, lt=1.0)
    tau: float = Field(1.5, gt=0.0)
    solver: str = Field("pf")
    steps: int = Field(10, ge=0)
    ml_posterior: bool = Field(False)

    model_config = {"extra": "ignore"}


class LossWeights(BaseSettings):
    duration: float = Field(1.0, ge=0.0)
    pitch: float = Field(1.0, ge=0.0)
    energy: float = Field(1.0, ge=0.0)
    align: float = Field(1.0, ge=0.0)
    prior: float = Field(1.0, ge=0.0)
    diffusion: float = Field(1.0, ge=0.0)

    model_config = {"extra": "ignore"}


class TrainConfig(BaseSettings):
    batch_size: int = Field(16, ge=1)
    max_steps: int = Field(20000, ge=1)
    warmup_steps: int = Field(4000, ge=1)
    lr_scale: float = Field(1.0, gt=0.0)
    seed: int = Field(1234)

    # ablations
    no_ef_generators: bool = Field(False)
    no_energy: bool = Field(False)

    prior_anneal_steps: int = Field(10000, ge=0)
    grad_clip: float = Field(1.0, gt=0.0)
    loss_weights: LossWeights = LossWeights()

    log_every: int = Field(1, ge=1)
    eval_every: int = Field(1000, ge=0)
    eval_utterances: int = Field(4, ge=1)
    checkpoint_every: int = Field(1000, ge=0)

    model_config = {"extra": "ignore"}


class SweepSpec(BaseSettings):
    solvers: List[str] = Field(default=["pf", "ml"], min_length=1)
    step_counts: List[int] = Field(default=[0, 5, 10, 50, 100], min_length=1)
    tau: float = Field(1.5, gt=0.0)
    seeds: List[int] = Field(default=[0, 1, 2], min_length=1)
    use_reference_durations: bool = Field(True)

    model_config = {"extra": "ignore"}


class Settings(BaseSettings):
    # top level settings for the toolkit
    app_name: str = "FormantDiff desk-scale toolkit"
    environment: str = Field(default="local")
    data_root: Path = Field(default=Path("data"))
    log_level: str = Field(default="INFO")

    audio: AudioConfig = AudioConfig()
    model: ModelConfig = ModelConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    train: TrainConfig = TrainConfig()
    sweep: SweepSpec = SweepSpec()

    model_config = {
        "env_file": ".env",
        "env_prefix": "FORMANTDIFF_",
        "env_nested_delimiter": "__",
        "extra": "ignore",
        "protected_namespaces": (),
    }


def load_settings(config_file: Optional[Path] = None) -> Settings:
    # a config file uses the same KEY=VALUE syntax as .env
    if config_file is None:
        return Settings()
    return Settings(_env_file=(".env", str(config_file)))


def config_echo(section: BaseSettings) -> Dict[str, object]:
    return section.model_dump(mode="json")


# create one settings object we can import everywhere
settings = Settings()
