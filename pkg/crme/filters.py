from __future__ import annotations

from typing import Iterable

from .dataset import SampleRecord


def filter_records(
    records: Iterable[SampleRecord],
    *,
    source: str | None = None,
    flawed: bool | None = None,
    min_samples: int | None = None,
    max_samples: int | None = None,
    record_ids: Iterable[str] | None = None,
) -> list[SampleRecord]:
    wanted = set(record_ids) if record_ids is not None else None
    results: list[SampleRecord] = []
    for record in records:
        if source is not None and record.meta.source != source:
            continue
        if flawed is not None and record.flawed != flawed:
            continue
        if min_samples is not None and record.meta.num_samples < min_samples:
            continue
        if max_samples is not None and record.meta.num_samples > max_samples:
            continue
        if wanted is not None and record.record_id not in wanted:
            continue
        results.append(record)
    return results


def sort_records(records: Iterable[SampleRecord]) -> list[SampleRecord]:
    def sort_key(item: SampleRecord) -> tuple[int, str]:
        return (0 if item.record_id.isdigit() else 1, item.record_id.zfill(12))

    return sorted(records, key=sort_key)
