from django.db import models


class TrainingRun(models.Model):
    """
    Summary of one finished training run, stored when `ldp train --record`
    (or sweep/replay with --record) is used.

    Fields:
        created_at (DateTimeField): When the row was written
        output_dir (CharField): Directory holding the run's CSV logs, checkpoint and summary
        scheduler (CharField): Precision schedule kind ('learned', 'static', 'replay', ...)
        seed (CharField): The run seed (a 64-bit unsigned integer, stored as text)
        epochs (IntegerField): Number of training epochs
        t_frac (FloatField): Cost target as a fraction of the static 8-bit cost
        final_accuracy (FloatField): Test accuracy after the last epoch, in [0, 1]
        total_train_bitops (FloatField): Training BitOPs summed over every iteration
        final_inference_bitops (FloatField): Per-sample inference BitOPs at the final bit-widths
        mean_final_bits (FloatField): Mean bit-width over quantized layers at the end of training
        config (JSONField): The fully-defaulted run config
    """
    created_at = models.DateTimeField(auto_now_add=True)
    output_dir = models.CharField(max_length=500)
    scheduler = models.CharField(max_length=32)
    seed = models.CharField(max_length=20)
    epochs = models.IntegerField()
    t_frac = models.FloatField()
    final_accuracy = models.FloatField()
    total_train_bitops = models.FloatField(help_text="Summed over iterations, per input sample")
    final_inference_bitops = models.FloatField(help_text="Per input sample")
    mean_final_bits = models.FloatField()
    config = models.JSONField()

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.scheduler} run in {self.output_dir} (acc {self.final_accuracy:.4f})"

    @classmethod
    def from_artifacts(cls, artifacts):
        summary, cfg = artifacts.summary, artifacts.config
        return cls.objects.create(
            output_dir=str(artifacts.output_dir),
            scheduler=summary['scheduler'],
            seed=str(cfg.train.seed),
            epochs=cfg.train.epochs,
            t_frac=cfg.precision.t_frac,
            final_accuracy=summary['final_acc'],
            total_train_bitops=summary['total_train_bitops'],
            final_inference_bitops=summary['final_inference_bitops'],
            mean_final_bits=summary['mean_final_bits'],
            config=cfg.to_dict(),
        )
