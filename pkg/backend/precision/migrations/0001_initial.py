from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('output_dir', models.CharField(max_length=500)),
                ('scheduler', models.CharField(max_length=32)),
                ('seed', models.CharField(max_length=20)),
                ('epochs', models.IntegerField()),
                ('t_frac', models.FloatField()),
                ('final_accuracy', models.FloatField()),
                ('total_train_bitops', models.FloatField(help_text='Summed over iterations, per input sample')),
                ('final_inference_bitops', models.FloatField(help_text='Per input sample')),
                ('mean_final_bits', models.FloatField()),
                ('config', models.JSONField()),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
