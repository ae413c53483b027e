"""``synth``: write a synthetic dataset with a planted pricing kernel."""
from typing import Optional

import click

from app.cli.common import (config_option, force_option, out_option,
                            prepare_out_dir, provenance, resolve_config,
                            seed_option)
from app.data.panel import (DATES_FILE, SPLIT_FILE, dataset_digest,
                            write_dataset, write_split_spec)
from app.services.synth_service import (ORACLE_FILE, generate, period_labels,
                                        to_dataset, write_oracle)


@click.command("synth")
@config_option
@out_option
@force_option
@seed_option
def synth_command(
    config_path: Optional[str], out_dir: str, force: bool, seed_override: Optional[int]
) -> None:
    """Generate a synthetic panel in the dataset file formats."""
    config = resolve_config(config_path, seed_override)
    out = prepare_out_dir(out_dir, force)

    data = generate(config.synth_config())
    labels = period_labels(config.synth_periods)
    written = write_dataset(to_dataset(data, labels), out)
    write_oracle(data.oracle, out / ORACLE_FILE)
    write_split_spec(config.split_spec(), out / SPLIT_FILE)
    with (out / DATES_FILE).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write("period,label\n")
        for period, label in labels.items():
            handle.write(f"{period},{label}\n")

    digest = dataset_digest(out)
    provenance("synth").info(
        f"config={config.digest} data={digest} out={out} files={[p.name for p in written]}"
    )
    click.echo(
        f"wrote {len(written)} dataset files and the {ORACLE_FILE}, {SPLIT_FILE} and {DATES_FILE} "
        f"sidecars to {out} (data digest {digest})"
    )
