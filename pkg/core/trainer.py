"""
Trainer Module
Two-stage training: image-text matching pretraining of the encoders, then
alternating discriminator/generator updates with the encoders and the
perceptual extractor frozen. Also hosts the evaluation routine.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import torch
from torch import Tensor

from core.checkpoint import Checkpoint, checkpoint_from_store
from core.data_io import Batch, PairDataset, Vocabulary
from core.discriminator import Discriminator, DiscriminatorConfig
from core.encoders import EncoderConfig, ImageSemanticFeatures, build_encoders
from core.exceptions import ConfigMismatchError, DatasetError, DomainError, NumericError
from core.generator import Generator, GeneratorConfig
from core.jpeg_codec import degrade, validate_quality
from core.losses import (DamsmGammas, LossReport, LossWeights, contrastive_loss, contrastive_loss_unsimplified,
                         damsm_loss, gan_losses, reconstruction_loss, total_loss)
from core.nn_core import AdamOptimizer, ParamStore, init_weights
from core.quality_metrics import cap_psnr, fid_small, load_extractor, perceptual_distance, psnr
from utils.logger import get_logger, log_performance

logger = get_logger(__name__)

STAGES = ('damsm', 'adversarial')
CONTRASTIVE_VARIANTS = ('simplified', 'unsimplified')
ENCODER_PREFIXES = ('text_encoder', 'image_encoder')
RUN_FIELDS = ('epochs', 'max_steps', 'lr_start', 'lr_end', 'lr_decay_every', 'decay_factor', 'd_lr_scale')


def _desk_encoder() -> EncoderConfig:
    return EncoderConfig(word_dim=64, embedding_dim=128, region_grid=8, final_stride_padding=1,
                         backbone_channels=(16, 32, 64, 128), backbone_strides=(2, 2, 2, 1))


def _desk_generator() -> GeneratorConfig:
    return GeneratorConfig(base_channels=32, bottleneck_channels=64, input_size=64,
                           word_dim=128, sentence_dim=128)


def _desk_discriminator() -> DiscriminatorConfig:
    return DiscriminatorConfig(channels=(32, 64, 128, 128))


@dataclass
class TrainConfig:
    """Hyperparameters of a training run; defaults are desk scale (64x64, D=128)"""
    stage: str = 'adversarial'
    qf: int = 5
    batch_size: int = 4
    lr_start: float = 1e-4
    lr_end: float = 1e-8
    lr_decay_every: int = 20
    decay_factor: float = 0.1
    d_lr_scale: float = 1.0
    epochs: int = 100
    max_steps: Optional[int] = None
    seed: int = 0
    image_size: int = 64
    subsampling: str = '420'
    flip: bool = True
    contrastive_variant: str = 'simplified'
    perceptual_seed: int = 1234
    perceptual_weights: Optional[str] = None
    num_threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    gammas: DamsmGammas = field(default_factory=DamsmGammas)
    encoder: EncoderConfig = field(default_factory=_desk_encoder)
    generator: GeneratorConfig = field(default_factory=_desk_generator)
    discriminator: DiscriminatorConfig = field(default_factory=_desk_discriminator)

    def __post_init__(self):
        if self.stage == 'adv':
            self.stage = 'adversarial'
        if self.stage not in STAGES:
            raise DomainError(f"Unknown stage {self.stage!r}; expected one of {STAGES}")
        validate_quality(self.qf)
        if self.batch_size < 1:
            raise DomainError("batch_size must be at least 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise DomainError("Learning rates must satisfy lr_start >= lr_end > 0")
        if self.lr_decay_every < 1 or not (0 < self.decay_factor <= 1):
            raise DomainError("lr_decay_every must be >= 1 and decay_factor in (0, 1]")
        if self.contrastive_variant not in CONTRASTIVE_VARIANTS:
            raise DomainError(f"contrastive_variant must be one of {CONTRASTIVE_VARIANTS}")
        if self.image_size % 16:
            raise DomainError(f"image_size must be divisible by 16, got {self.image_size}")
        if self.generator.word_dim != self.encoder.embedding_dim or \
                self.generator.sentence_dim != self.encoder.embedding_dim:
            raise DomainError("Generator text dimensions must equal the encoder embedding dimension")
        self.generator.input_size = self.image_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainConfig':
        nested = {'weights': LossWeights, 'gammas': DamsmGammas, 'encoder': EncoderConfig,
                  'generator': GeneratorConfig, 'discriminator': DiscriminatorConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DomainError(f"Unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in nested and isinstance(value, dict):
                value = nested[key](**value)
            kwargs[key] = value
        return cls(**kwargs)

    def with_overrides(self, overrides: Dict[str, str]) -> 'TrainConfig':
        """Apply dotted key=value overrides, e.g. {'weights.lambda1': '0'}"""
        data = self.to_dict()
        for key, raw in overrides.items():
            target = data
            parts = key.split('.')
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise DomainError(f"Unknown config key: {key}")
                target = target[part]
            if parts[-1] not in target:
                raise DomainError(f"Unknown config key: {key}")
            target[parts[-1]] = _parse_value(raw, target[parts[-1]])
        return TrainConfig.from_dict(data)

    def model_fields(self) -> dict:
        """Fields that shape network parameters"""
        generator = self.generator.to_dict()
        generator.pop('input_size')
        shaped = {'encoder': self.encoder.to_dict(), 'generator': generator,
                  'discriminator': self.discriminator.to_dict(), 'perceptual_seed': self.perceptual_seed}
        if self.perceptual_weights:
            shaped['perceptual_weights'] = self.perceptual_weights
        return shaped

    def for_next_stage(self, stage: str) -> 'TrainConfig':
        """Copy for a following stage; run length and learning-rate schedule restart from defaults"""
        data = self.to_dict()
        defaults = TrainConfig()
        for name in RUN_FIELDS:
            data[name] = getattr(defaults, name)
        data['stage'] = stage
        return TrainConfig.from_dict(data)


def _parse_value(raw, current):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        return raw.lower() in ('1', 'true', 'yes')
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        return [int(v) for v in raw.split(',')]
    if current is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def config_hash(config: TrainConfig) -> str:
    """SHA-256 of the canonical JSON of the model-shaping fields"""
    canonical = json.dumps(config.model_fields(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def learning_rate_at(epoch: int, config: TrainConfig) -> float:
    """Decade decay every lr_decay_every epochs, floored at lr_end"""
    lr = config.lr_start * config.decay_factor ** (epoch // config.lr_decay_every)
    return max(lr, config.lr_end)


class TrainingLog:
    """JSON-lines writer, one LossReport object per step"""

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self.records: List[dict] = []
        self._file = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, 'a', encoding='utf-8')

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._file:
            self._file.write(json.dumps(record, sort_keys=True) + '\n')
            self._file.flush()

    def close(self) -> None:
        if self._file:
            self._file.close()
            self._file = None

    def __enter__(self) -> 'TrainingLog':
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    @staticmethod
    def read(path) -> List[dict]:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]


class Trainer:
    """
    Owns every network and optimizer of a run

    The training loop is the only writer of the parameter store. Given a fixed
    seed and a single thread the loss trajectory is bit-reproducible, including
    across a checkpoint save/restore at any step boundary.
    """

    def __init__(self, config: TrainConfig, vocab: Vocabulary, log: Optional[TrainingLog] = None):
        self.config = config
        self.vocab = vocab
        self.log = log or TrainingLog()
        torch.set_num_threads(max(1, config.num_threads))
        torch.manual_seed(config.seed)

        config.encoder.vocab_size = len(vocab)
        self.text_encoder, self.image_encoder = build_encoders(config.encoder, config.seed)
        self.generator = init_weights(Generator(config.generator), config.seed + 2)
        self.discriminator = init_weights(Discriminator(config.discriminator), config.seed + 3)
        self.extractor = load_extractor(config.perceptual_seed, config.perceptual_weights)
        self.store = ParamStore({
            'text_encoder': self.text_encoder,
            'image_encoder': self.image_encoder,
            'generator': self.generator,
            'discriminator': self.discriminator,
        })
        self.config_hash = config_hash(config)

        self.epoch = 0
        self.batch_in_epoch = 0
        self.step = 0
        self.optimizers: Dict[str, AdamOptimizer] = {}
        self._pending_optimizer_states: Dict[str, dict] = {}
        logger.info(f"Trainer initialized (stage={config.stage}, params={self.store.count()}, "
                    f"config_hash={self.config_hash[:12]})")

    # Checkpointing

    def checkpoint(self) -> Checkpoint:
        states = {name: opt.state_dict() for name, opt in self.optimizers.items()}
        states.update({k: v for k, v in self._pending_optimizer_states.items() if k not in states})
        return checkpoint_from_store(
            self.store, self.config.to_dict(), self.config_hash,
            optimizer_states=states, stage=self.config.stage, epoch=self.epoch,
            batch_in_epoch=self.batch_in_epoch, step=self.step,
            rng_state=torch.get_rng_state(), vocab=list(self.vocab.tokens))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, log: Optional[TrainingLog] = None,
                        stage: Optional[str] = None) -> 'Trainer':
        """Rebuild a trainer and resume at the checkpoint's step boundary"""
        config = TrainConfig.from_dict(checkpoint.config)
        if stage:
            config.stage = 'adversarial' if stage == 'adv' else stage
        if not checkpoint.vocab:
            raise ConfigMismatchError("Checkpoint carries no vocabulary")
        trainer = cls(config, Vocabulary(checkpoint.vocab), log)
        if trainer.config_hash != checkpoint.config_hash:
            raise ConfigMismatchError(
                f"Config hash mismatch: checkpoint {checkpoint.config_hash[:12]} vs {trainer.config_hash[:12]}")
        trainer.store.load_state_tensors(checkpoint.tensors)
        if checkpoint.stage == config.stage:
            trainer.epoch = checkpoint.epoch
            trainer.batch_in_epoch = checkpoint.batch_in_epoch
            trainer.step = checkpoint.step
            trainer._pending_optimizer_states = dict(checkpoint.optimizer_states)
        if checkpoint.rng_state is not None:
            torch.set_rng_state(checkpoint.rng_state)
        return trainer

    def load_encoders(self, checkpoint: Checkpoint) -> None:
        """Copy pretrained encoder weights into this run"""
        if checkpoint.vocab and list(checkpoint.vocab) != list(self.vocab.tokens):
            raise ConfigMismatchError("Encoder checkpoint vocabulary differs from the training vocabulary")
        for prefix, module in (('text_encoder', self.text_encoder), ('image_encoder', self.image_encoder)):
            own = {k[len(prefix) + 1:]: v for k, v in checkpoint.tensors_for(prefix).items()}
            if not own:
                raise ConfigMismatchError(f"Checkpoint has no '{prefix}' tensors")
            try:
                module.load_state_dict(own)
            except RuntimeError as e:
                raise ConfigMismatchError(f"Encoder checkpoint does not fit this config: {e}") from e
        logger.info("Loaded pretrained encoders")

    # Optimizers

    def _optimizer(self, name: str, prefix: Optional[str], lr: float) -> AdamOptimizer:
        if name not in self.optimizers:
            optimizer = AdamOptimizer(self.store, lr, prefix=prefix)
            if name in self._pending_optimizer_states:
                optimizer.load_state_dict(self._pending_optimizer_states.pop(name))
            self.optimizers[name] = optimizer
        return self.optimizers[name]

    def _set_lr(self, epoch: int) -> float:
        lr = learning_rate_at(epoch, self.config)
        for name, optimizer in self.optimizers.items():
            scaled = lr * self.config.d_lr_scale if name == 'discriminator' else lr
            if optimizer.lr != scaled:
                logger.info(f"Learning rate for {name} set to {scaled:.3e} at epoch {epoch}")
                optimizer.set_lr(scaled)
        return lr

    # Loop

    def _run(self, dataset: PairDataset, step_fn) -> List[dict]:
        if len(dataset) == 0:
            raise DatasetError("Empty dataset")
        config = self.config
        records = []
        while self.epoch < config.epochs:
            lr = self._set_lr(self.epoch)
            if self.batch_in_epoch == 0:
                logger.info(f"Epoch {self.epoch} start (lr={lr:.3e}, step={self.step})")
            batches = dataset.batches(config.batch_size, config.seed, self.epoch, flip=config.flip)
            for index, batch in enumerate(batches):
                if index < self.batch_in_epoch:
                    continue
                if config.max_steps is not None and self.step >= config.max_steps:
                    return records
                record = step_fn(batch)
                record.update({'step': self.step, 'epoch': self.epoch, 'lr': lr})
                self.log.write(record)
                records.append(record)
                self.step += 1
                self.batch_in_epoch = index + 1
                logger.debug(f"step {record['step']}: {record}")
            logger.info(f"Epoch {self.epoch} end (step={self.step})")
            self.epoch += 1
            self.batch_in_epoch = 0
        return records

    def _check(self, value: Tensor, component: str) -> None:
        if not torch.isfinite(value).all():
            raise NumericError("Non-finite loss", component=component, step=self.step)

    @log_performance
    def pretrain_damsm(self, dataset: PairDataset,
                       image_features: Optional[ImageSemanticFeatures] = None) -> Checkpoint:
        """
        Stage 1: minimize the image-text matching loss over matched batches

        Args:
            dataset: matched image-caption pairs
            image_features: imported region/global features; when given, they
                replace the image encoder, which stays frozen, and only the text
                encoder trains. Rows are matched to images by stem, or by
                manifest order when the file names no stems.
        """
        if self.config.stage != 'damsm':
            raise DomainError("pretrain_damsm needs a config with stage='damsm'")
        self.store.freeze('generator')
        self.store.freeze('discriminator')
        for prefix in ENCODER_PREFIXES:
            self.store.unfreeze(prefix)
        if image_features is not None:
            image_features = self._align_features(image_features, dataset)
            self.store.freeze('image_encoder')
        optimizer = self._optimizer('damsm', None, learning_rate_at(self.epoch, self.config))
        self.text_encoder.train()
        self.image_encoder.train()

        def step_fn(batch: Batch) -> dict:
            words, sentence = self.text_encoder(batch.ids, batch.lengths)
            if image_features is not None:
                features = image_features.select(batch.stems)
            else:
                features = self.image_encoder(batch.images)
            l_word, l_sentence = damsm_loss(features, words, sentence, self.config.gammas,
                                            batch.lengths.tolist())
            loss = l_word + l_sentence
            self._check(loss, 'l_it')
            optimizer.zero_grad()
            loss.backward()
            self._step_optimizer(optimizer)
            return {'l_word': float(l_word), 'l_sentence': float(l_sentence), 'l_it': float(loss)}

        self._run(dataset, step_fn)
        return self.checkpoint()

    def _align_features(self, features: ImageSemanticFeatures, dataset: PairDataset) -> ImageSemanticFeatures:
        if features.global_.shape[1] != self.config.encoder.embedding_dim:
            raise ConfigMismatchError(f"Imported features have dimension {features.global_.shape[1]}, "
                                      f"encoders use {self.config.encoder.embedding_dim}")
        if features.stems is None:
            stems = [entry.stem for entry in dataset.manifest.entries]
            if len(stems) != len(features):
                raise DatasetError(f"Imported features have {len(features)} rows for {len(stems)} images "
                                   f"and name no stems")
            features = ImageSemanticFeatures(features.regions, features.global_, stems)
        # Every training image must have a row
        features.select(sorted({pair.stem for pair in dataset.pairs}))
        logger.info(f"Stage 1 uses imported image features ({len(features)} rows)")
        return features

    @log_performance
    def train_adversarial(self, dataset: PairDataset, encoders: Optional[Checkpoint] = None) -> Checkpoint:
        """
        Stage 2: alternate one discriminator step and one generator step per batch

        Args:
            dataset: pairs degraded at config.qf
            encoders: stage-1 checkpoint; omitted only when resuming or for ablations

        Returns:
            Checkpoint of the final state
        """
        if self.config.stage != 'adversarial':
            raise DomainError("train_adversarial needs a config with stage='adversarial'")
        if dataset.qf != self.config.qf:
            raise ConfigMismatchError(f"Dataset was degraded at QF {dataset.qf}, run is configured for QF "
                                      f"{self.config.qf}")
        if encoders is not None:
            self.load_encoders(encoders)
        elif self.step == 0:
            logger.warning("Adversarial training without pretrained encoders")
        for prefix in ENCODER_PREFIXES:
            self.store.freeze(prefix)
        self.store.unfreeze('generator')
        self.store.unfreeze('discriminator')
        self.text_encoder.eval()
        self.image_encoder.eval()
        self.generator.train()
        self.discriminator.train()

        lr = learning_rate_at(self.epoch, self.config)
        g_opt = self._optimizer('generator', 'generator', lr)
        d_opt = self._optimizer('discriminator', 'discriminator', lr * self.config.d_lr_scale)
        self._run(dataset, lambda batch: self._adversarial_step(batch, g_opt, d_opt).to_dict())
        return self.checkpoint()

    def _step_optimizer(self, optimizer: AdamOptimizer) -> None:
        try:
            optimizer.step()
        except NumericError as e:
            raise NumericError("Non-finite gradient", parameter=e.parameter, step=self.step) from e

    def _adversarial_step(self, batch: Batch, g_opt: AdamOptimizer, d_opt: AdamOptimizer) -> LossReport:
        config = self.config
        weights = config.weights
        with torch.no_grad():
            words, sentence = self.text_encoder(batch.ids, batch.lengths)

        # Discriminator step
        with torch.no_grad():
            fake = self.generator(batch.compressed, words, sentence, batch.word_mask)
        d_real = self.discriminator(batch.images)
        d_fake = self.discriminator(fake)
        d_loss, _ = gan_losses(d_real, d_fake)
        self._check(d_loss, 'l_d')
        d_opt.zero_grad()
        d_loss.backward()
        self._step_optimizer(d_opt)

        # Generator step
        fake = self.generator(batch.compressed, words, sentence, batch.word_mask)
        l_r = reconstruction_loss(fake, batch.images)
        if config.contrastive_variant == 'unsimplified':
            l_c = contrastive_loss_unsimplified(fake, batch.images, batch.compressed, extractor=self.extractor)
        else:
            l_c = contrastive_loss(fake, batch.images, batch.compressed, weights.c, self.extractor)
        _, l_g = gan_losses(d_real.detach(), self.discriminator(fake))
        if weights.lambda4 > 0:
            l_word, l_sentence = damsm_loss(self.image_encoder(fake), words, sentence, config.gammas,
                                            batch.lengths.tolist())
            l_it = l_word + l_sentence
        else:
            l_it = torch.zeros((), dtype=fake.dtype)
        try:
            total, report = total_loss(l_c, l_r, l_g, l_it, weights)
        except NumericError as e:
            raise NumericError("Non-finite loss", component=e.component, step=self.step) from e
        g_opt.zero_grad()
        total.backward()
        self._step_optimizer(g_opt)
        # Discriminator gradients from the generator pass are discarded
        self.discriminator.zero_grad(set_to_none=True)

        report.extras['l_d'] = float(d_loss.detach())
        return report


def build_models(checkpoint: Checkpoint):
    """Rebuild (config, vocab, text_encoder, generator) from a checkpoint in eval mode"""
    config = TrainConfig.from_dict(checkpoint.config)
    if not checkpoint.vocab:
        raise ConfigMismatchError("Checkpoint carries no vocabulary")
    vocab = Vocabulary(checkpoint.vocab)
    config.encoder.vocab_size = len(vocab)
    if config_hash(config) != checkpoint.config_hash:
        raise ConfigMismatchError("Checkpoint config does not reproduce its recorded config hash")
    text_encoder, _ = build_encoders(config.encoder, config.seed)
    generator = Generator(config.generator)
    for prefix, module in (('text_encoder', text_encoder), ('generator', generator)):
        own = {k[len(prefix) + 1:]: v for k, v in checkpoint.tensors_for(prefix).items()}
        if not own:
            raise ConfigMismatchError(f"Checkpoint has no '{prefix}' tensors")
        module.load_state_dict(own)
        module.eval()
        for param in module.parameters():
            param.requires_grad_(False)
    return config, vocab, text_encoder, generator


@log_performance
def evaluate(checkpoint: Checkpoint, dataset: PairDataset, qf: int,
             config: Optional[TrainConfig] = None, batch_size: int = 8) -> Dict[str, float]:
    """
    Mean PSNR, perceptual distance and fid_small for compressed and deblocked images

    Args:
        checkpoint: trained checkpoint
        dataset: evaluation pairs (clean images are re-degraded at qf)
        qf: quality factor
        config: expected run config; its hash must match the checkpoint's

    Raises:
        ConfigMismatchError: config hash differs from the checkpoint's
    """
    validate_quality(qf)
    if config is not None:
        config = TrainConfig.from_dict(config.to_dict())
        config.encoder.vocab_size = len(checkpoint.vocab or [])
        expected = config_hash(config)
        if expected != checkpoint.config_hash:
            raise ConfigMismatchError(
                f"Config hash mismatch: checkpoint {checkpoint.config_hash[:12]} vs requested {expected[:12]}")
    run_config, vocab, text_encoder, generator = build_models(checkpoint)
    extractor = load_extractor(run_config.perceptual_seed, run_config.perceptual_weights)

    clean, compressed, deblocked = [], [], []
    with torch.no_grad():
        for batch in dataset.batches(batch_size, seed=0, epoch=0, shuffle=False):
            degraded = degrade(batch.images, qf, run_config.subsampling)
            words, sentence = text_encoder(batch.ids, batch.lengths)
            restored = generator(degraded, words, sentence, batch.word_mask)
            clean.extend(batch.images)
            compressed.extend(degraded)
            deblocked.extend(restored)

    def _mean(values):
        return float(sum(values) / len(values))

    metrics = {
        'qf': qf,
        'count': len(clean),
        'psnr_compressed': _mean([cap_psnr(psnr(c, i)) for c, i in zip(compressed, clean)]),
        'psnr_deblocked': _mean([cap_psnr(psnr(d, i)) for d, i in zip(deblocked, clean)]),
        'perceptual_compressed': _mean([float(perceptual_distance(c, i, extractor))
                                        for c, i in zip(compressed, clean)]),
        'perceptual_deblocked': _mean([float(perceptual_distance(d, i, extractor))
                                       for d, i in zip(deblocked, clean)]),
    }
    if len(clean) >= 2:
        metrics['fid_small_compressed'] = fid_small(compressed, clean, extractor)
        metrics['fid_small_deblocked'] = fid_small(deblocked, clean, extractor)
    for key, value in metrics.items():
        if isinstance(value, float) and not math.isfinite(value):
            raise NumericError("Non-finite evaluation metric", component=key)
    logger.info(f"Evaluation at QF {qf}: {metrics}")
    return metrics
