#!/usr/bin/env python3
"""Print the analytic backbone MAC report at full scale, with and without
token elimination, plus the relative reduction between the two."""

from caformer.pipeline import TrackerConfig
from caformer.profiler import REFERENCE_CTE_G, REFERENCE_TOTAL_G, estimate, format_giga

if __name__ == "__main__":
    base = estimate(TrackerConfig.paper())
    cte = estimate(TrackerConfig.paper(cte=True))
    print(f"baseline backbone:    {format_giga(base.total_macs)} G "
          f"(reference {REFERENCE_TOTAL_G} G)")
    print(f"with elimination:     {format_giga(cte.total_macs)} G "
          f"(reference {REFERENCE_CTE_G} G)")
    reduction = 1.0 - cte.total_macs / base.total_macs
    print(f"relative reduction:   {reduction:.2%}")
