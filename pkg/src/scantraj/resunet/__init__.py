"""Numpy Res-UNet+ segmenter with hand-written backward passes."""

from .net import (DecoderBlock, EncoderBlock, NetConfig, NetParams, ResUNetPlus, forward,
                  loss_and_grads)
from .train import (TrainResult, load_checkpoint, save_checkpoint, segment, train,
                    write_history_csv)

__all__ = [
    "DecoderBlock", "EncoderBlock", "NetConfig", "NetParams", "ResUNetPlus", "TrainResult",
    "forward", "load_checkpoint", "loss_and_grads", "save_checkpoint", "segment", "train",
    "write_history_csv",
]
