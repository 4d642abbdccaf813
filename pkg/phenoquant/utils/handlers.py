from collections.abc import Iterable
import logging
import math
from pathlib import Path

import pandas as pd

from .. import errors
from ..misc.const import QUANTILES
from ..misc.tables import header_line
from ..model.train import EpochLog, Trainer

__all__ = (
    "training_log_frame",
    "write_training_log",
    "stop_on_divergence",
)


def training_log_frame(entries: Iterable[EpochLog]) -> pd.DataFrame:
    """One row per epoch with every loss component and the learning rate"""
    rows = []
    for entry in entries:
        row = {"epoch": entry.epoch}
        row.update({f"pinball_q{round(q * 100)}": p for q, p in zip(QUANTILES, entry.pinball)})
        row.update({
            "periodicity": entry.periodicity,
            "crossing": entry.crossing,
            "total": entry.total,
            "learning_rate": entry.learning_rate,
        })
        rows.append(row)
    columns = ["epoch", *(f"pinball_q{round(q * 100)}" for q in QUANTILES),
               "periodicity", "crossing", "total", "learning_rate"]
    return pd.DataFrame(rows, columns=columns)


def write_training_log(trainer: Trainer, path: str|Path, command: str="fit"):
    """
    Generates and registers a callback that appends every finished epoch
    to a training log table.

    The file is created right away and holds the epochs the trainer
    already ran, so a resumed run keeps its history.

    :param trainer: :class:`Trainer`
        The :class:`Trainer` to register the callback to.
    :param path: Where the table goes. An existing file is replaced.

    Returns
    -------
    :class:`Callable[[EpochLog], None]`

    The registered callback. Passing it to
    :meth:`Trainer.remove_epoch_watcher` stops the logging.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(header_line(command) + "\n")
        training_log_frame(trainer.log).to_csv(f, index=False, lineterminator="\n")

    @trainer.epoch_end
    def callback(entry: EpochLog):
        with open(path, "a", encoding="utf-8", newline="") as f:
            training_log_frame([entry]).to_csv(f, index=False, header=False, lineterminator="\n")
        logging.debug("Appended epoch %d to %s", entry.epoch, path)
    return callback


def stop_on_divergence(trainer: Trainer, factor: float=10.0, patience: int=2):
    """
    Generates and registers a callback that aborts training once the
    epoch loss stays above ``factor`` times its best value for
    ``patience`` epochs in a row.

    :param trainer: :class:`Trainer`
    :param factor: :class:`float` Allowed growth over the best loss
    :param patience: :class:`int` Epochs the growth may last

    Returns
    -------
    :class:`Callable[[EpochLog], None]`

    The registered callback.

    Raises
    ------
    :class:`DivergenceError`
        From within :meth:`Trainer.run`, when the loss diverged
    """
    best = math.inf
    strikes = 0

    @trainer.epoch_end
    def callback(entry: EpochLog):
        nonlocal best, strikes
        if entry.total <= best:
            best = entry.total
            strikes = 0
            return
        if entry.total > factor * best:
            strikes += 1
            logging.warning(
                "Epoch %d loss %.4g is %.1f times the best so far", entry.epoch, entry.total, entry.total / best
            )
            if strikes >= patience:
                raise errors.DivergenceError(f"Training diverged at epoch {entry.epoch}")
        else:
            strikes = 0
    return callback
