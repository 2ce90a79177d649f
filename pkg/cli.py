#!/usr/bin/env python3
"""
Command-line entry point: degrade, train, deblock, eval, serve

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import base64
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

from config.settings import Config
from core.exceptions import TGJARError
from utils.logger import get_logger, setup_logger

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


def _parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split('=', 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    app_config = Config()
    parser = _Parser(prog='tgjar', description='Text-guided JPEG artifacts reduction')
    parser.add_argument('--log-level', default=None, help='Override LOG_LEVEL')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    degrade = commands.add_parser('degrade', help='Simulate JPEG compression of an image')
    degrade.add_argument('--qf', type=int, required=True, help='Quality factor 1-100')
    degrade.add_argument('--in', dest='input', required=True, help='Input image')
    degrade.add_argument('--out', required=True, help='Output PNG')
    degrade.add_argument('--subsampling', choices=('444', '420'), default=app_config.DEFAULT_SUBSAMPLING)

    train = commands.add_parser('train', help='Run a training stage')
    train.add_argument('--stage', choices=('damsm', 'adv'), required=True)
    train.add_argument('--qf', type=int, default=app_config.DEFAULT_QF)
    train.add_argument('--data', required=True, help='Dataset root (images/, captions/)')
    train.add_argument('--out', required=True, help='Output checkpoint path')
    train.add_argument('--epochs', type=int, default=None)
    train.add_argument('--seed', type=int, default=None)
    train.add_argument('--image-size', type=int, default=None)
    train.add_argument('--batch-size', type=int, default=None)
    train.add_argument('--max-steps', type=int, default=None)
    train.add_argument('--encoders', default=None, help='Stage-1 checkpoint (required for --stage adv)')
    train.add_argument('--resume', default=None, help='Checkpoint to resume from')
    train.add_argument('--image-features', default=None,
                       help='Precomputed .npz region/global features used instead of the image encoder (damsm only)')
    train.add_argument('--log', default=None, help='JSON-lines loss log path')
    train.add_argument('--workers', type=int, default=1, help='Threads for data preparation')
    train.add_argument('--set', action='append', metavar='KEY=VALUE', help='Config override')

    deblock = commands.add_parser('deblock', help='Deblock one image under a caption')
    deblock.add_argument('--checkpoint', required=True)
    deblock.add_argument('--in', dest='input', required=True)
    deblock.add_argument('--out', required=True)
    deblock.add_argument('--caption', required=True)
    deblock.add_argument('--qf', type=int, default=None, help='Degrade the input first')
    deblock.add_argument('--reference', default=None, help='Ground truth for metrics')
    deblock.add_argument('--attention-dir', default=None, help='Write per-word attention PNGs here')

    evaluate = commands.add_parser('eval', help='Evaluate a checkpoint on a dataset')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--qf', type=int, required=True)
    evaluate.add_argument('--image-size', type=int, default=None)
    evaluate.add_argument('--split', default='test')
    evaluate.add_argument('--set', action='append', metavar='KEY=VALUE', help='Expected config override')
    evaluate.add_argument('--out', default=None, help='Write metrics JSON here')

    serve = commands.add_parser('serve', help='Start the HTTP service')
    serve.add_argument('--checkpoint', default=app_config.CHECKPOINT_PATH)
    serve.add_argument('--port', type=int, default=app_config.PORT)
    serve.add_argument('--host', default=app_config.HOST)
    return parser


def cmd_degrade(args) -> int:
    from core.data_io import load_image, save_image
    from core.deblocker import pad_to_multiple
    from core.jpeg_codec import degrade

    image = load_image(args.input)
    height, width = image.shape[-2:]
    compressed = degrade(pad_to_multiple(image), args.qf, args.subsampling)[:, :height, :width]
    save_image(compressed, args.out)
    logger.info(f"Wrote {args.out} (QF {args.qf})")
    return EXIT_OK


def cmd_train(args) -> int:
    from core.checkpoint import load_checkpoint, save_checkpoint
    from core.data_io import PairDataset, Vocabulary, build_vocab, load_dataset
    from core.encoders import load_external_features
    from core.trainer import TrainConfig, Trainer, TrainingLog

    overrides = _parse_overrides(args.set)
    if args.image_features and args.stage != 'damsm':
        raise UsageError('--image-features applies to --stage damsm only')
    manifest = load_dataset(args.data, 'train')
    log_path = args.log or str(Path(Config().TRAIN_LOG_DIR) / f"{Path(args.out).stem}.jsonl")
    resume = load_checkpoint(args.resume) if args.resume else None
    encoders = load_checkpoint(args.encoders) if args.encoders else None
    if args.stage == 'adv' and encoders is None and resume is None:
        raise UsageError('--stage adv requires --encoders (or --resume)')

    log = TrainingLog(log_path)
    try:
        if resume is not None:
            trainer = Trainer.from_checkpoint(resume, log, stage=args.stage)
            if args.epochs is not None:
                trainer.config.epochs = args.epochs
            if args.max_steps is not None:
                trainer.config.max_steps = args.max_steps
        else:
            if encoders is not None:
                base = TrainConfig.from_dict(encoders.config).for_next_stage(args.stage)
            else:
                base = TrainConfig()
            values = {'stage': args.stage, 'qf': str(args.qf)}
            if encoders is None:
                app_config = Config()
                values['perceptual_seed'] = str(app_config.PERCEPTUAL_SEED)
                if app_config.PERCEPTUAL_WEIGHTS:
                    values['perceptual_weights'] = app_config.PERCEPTUAL_WEIGHTS
            for key, value in (('epochs', args.epochs), ('seed', args.seed), ('image_size', args.image_size),
                               ('batch_size', args.batch_size), ('max_steps', args.max_steps)):
                if value is not None:
                    values[key] = str(value)
            values.update(overrides)
            config = base.with_overrides(values)
            if encoders is not None:
                vocab = Vocabulary(encoders.vocab)
            elif manifest.vocab_path is not None:
                vocab = Vocabulary.load(manifest.vocab_path)
            else:
                vocab = build_vocab(manifest)
            trainer = Trainer(config, vocab, log)

        config = trainer.config
        dataset = PairDataset(manifest, trainer.vocab, config.image_size, config.qf,
                              config.encoder.max_len, config.subsampling, workers=args.workers)
        if config.stage == 'damsm':
            features = None
            if args.image_features:
                features = load_external_features(args.image_features, config.encoder.embedding_dim)
            checkpoint = trainer.pretrain_damsm(dataset, features)
        else:
            checkpoint = trainer.train_adversarial(dataset, encoders if resume is None else None)
    finally:
        log.close()

    digest = save_checkpoint(checkpoint, args.out)
    print(json.dumps({'checkpoint': args.out, 'sha256': digest, 'step': checkpoint.step, 'log': log_path}))
    return EXIT_OK


def cmd_deblock(args) -> int:
    from core.data_io import load_image, save_image
    from core.deblocker import DeblockingModel
    from utils.image_codec import encode_gray_png

    model = DeblockingModel(args.checkpoint)
    image = load_image(args.input)
    reference = load_image(args.reference) if args.reference else None
    result = model.deblock(image, args.caption, qf=args.qf, reference=reference,
                           with_attention=bool(args.attention_dir))
    save_image(result.deblocked, args.out)
    if args.attention_dir:
        out_dir = Path(args.attention_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for index, item in enumerate(result.attention):
            path = out_dir / f"{index:02d}_{item['word']}.png"
            path.write_bytes(base64.b64decode(encode_gray_png(item['map'])))
    print(json.dumps({'out': args.out, 'metrics': result.metrics}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from core.checkpoint import load_checkpoint
    from core.data_io import PairDataset, Vocabulary, load_dataset
    from core.trainer import TrainConfig, evaluate

    checkpoint = load_checkpoint(args.checkpoint)
    expected = TrainConfig.from_dict(checkpoint.config)
    overrides = _parse_overrides(args.set)
    if args.image_size is not None:
        overrides['image_size'] = str(args.image_size)
    if overrides:
        expected = expected.with_overrides(overrides)

    manifest = load_dataset(args.data, args.split)
    dataset = PairDataset(manifest, Vocabulary(checkpoint.vocab), expected.image_size, args.qf,
                          expected.encoder.max_len, expected.subsampling)
    metrics = evaluate(checkpoint, dataset, args.qf, expected)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + '\n', encoding='utf-8')
    print(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    from app import create_app

    app = create_app(checkpoint_path=args.checkpoint)
    logger.info(f"Starting deblocking service on {args.host}:{args.port}")
    app.run(host=args.host, port=args.port, debug=False, threaded=True)
    return EXIT_OK


COMMANDS = {
    'degrade': cmd_degrade,
    'train': cmd_train,
    'deblock': cmd_deblock,
    'eval': cmd_eval,
    'serve': cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logger(log_level=args.log_level)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(f"tgjar {args.command}: error: {e}\n")
        return EXIT_USAGE
    except (TGJARError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(f"tgjar {args.command}: {type(e).__name__}: {e}\n")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
