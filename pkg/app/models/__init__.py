# models package - domain value types (dataclasses) and the results-store ORM table
