import csv
import math
from argparse import ArgumentParser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jinja2


@dataclass
class Entry:
    """One row of the sweep index page"""

    value: str
    status: str
    exit_code: str
    time_to_ball: str
    final_w2: str
    worst_margins: dict[str, str]
    url: str
    error: str


MARGIN_LABELS = {
    'extremal_shift_decrease': 'shift decrease',
    'held_interval_decrease': 'interval decrease',
    'step_speed_bound': 'step bound',
}


def _short(text: str) -> str:
    """Numbers to 4 significant figures, blanks to a dash"""
    if not text:
        return '-'
    try:
        value = float(text)
    except ValueError:
        return text
    return f'{value:.4g}' if math.isfinite(value) else text


def digest_sweep(sweep_path: str) -> tuple[str, list[Entry]]:
    """Read sweep.csv into index entries; report links are relative to the sweep directory"""
    entries: list[Entry] = []
    axis = ''
    with open(sweep_path) as handle:
        for row in csv.DictReader(handle):
            axis = row['axis']
            entries.append(
                Entry(
                    value=_short(row['value']),
                    status=row['status'],
                    exit_code=row['exit_code'],
                    time_to_ball=_short(row['time_to_ball']),
                    final_w2=_short(row['final_w2']),
                    worst_margins={label: _short(row[column]) for column, label in MARGIN_LABELS.items()},
                    url=row['report'],
                    error=row['error'],
                ),
            )
    return axis, entries


def main(sweep: str, output: str, title: str | None = None) -> None:
    """Render the sweep index page"""

    axis, entries = digest_sweep(sweep)

    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(
            str(resources.files('stab_flow') / 'templates'),
        ),
        autoescape=True,
    )

    template = env.get_template('index.html.jinja')

    content = template.render(entries=entries, axis=axis, title=title or f'{axis} sweep', labels=MARGIN_LABELS)

    with Path(output).open('w') as f:
        f.write(content)


if __name__ == '__main__':
    parser = ArgumentParser(description='Generate an index page for the jobs of one sweep')
    parser.add_argument('--sweep', help='sweep.csv written by `stab sweep`', required=True)
    parser.add_argument('--output', help='Path to write the index HTML', required=True)
    parser.add_argument('--title', help='page title', default=None)
    args = parser.parse_args()
    main(sweep=args.sweep, output=args.output, title=args.title)
