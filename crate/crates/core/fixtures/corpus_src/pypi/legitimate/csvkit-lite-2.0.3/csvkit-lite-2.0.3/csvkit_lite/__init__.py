import csv
import io


def column_totals(text):
    totals = {}
    for row in csv.DictReader(io.StringIO(text)):
        for key, value in row.items():
            try:
                totals[key] = totals.get(key, 0.0) + float(value)
            except ValueError:
                continue
    return totals
