import pytest

from knowmatch.knowledge import AnnotationStore, ColumnTypeAnnotation, EntityMention
from knowmatch.serializer import build_vocab
from knowmatch.tabular import Record, Table


def make_table(name, schema, rows):
    records = tuple(
        Record(entry_id=str(i), columns=tuple(zip(schema, values)))
        for i, values in enumerate(rows)
    )
    return Table(name=name, schema=tuple(schema), rows=records)


@pytest.fixture
def product_tables():
    left = make_table(
        "tableA",
        ("title", "price"),
        [("apple iphone 6s", "$199.00"), ("galaxy note", "$149.00")],
    )
    right = make_table(
        "tableB",
        ("title", "price"),
        [("apple iphone 6s plus", "$229.00"), ("galaxy note 4", "$150.00")],
    )
    return left, right


@pytest.fixture
def tokenizer(product_tables):
    left, right = product_tables
    return build_vocab([left, right], extra_labels=["song", "mobile phone"])


@pytest.fixture
def annotated_store():
    store = AnnotationStore()
    store.add_column_type(ColumnTypeAnnotation("tableA", "title", "name", 1.0))
    store.add_column_type(ColumnTypeAnnotation("tableA", "price", "price", 1.0))
    store.add_column_type(ColumnTypeAnnotation("tableB", "title", "name", 1.0))
    store.add_column_type(ColumnTypeAnnotation("tableB", "price", "price", 1.0))
    store.add_mention(
        EntityMention("tableA", "0", "title", 0, 2, "apple iphone", "PRODUCT")
    )
    store.add_mention(
        EntityMention("tableB", "0", "title", 0, 2, "apple iphone", "PRODUCT")
    )
    return store
