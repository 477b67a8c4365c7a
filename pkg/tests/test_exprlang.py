import math
import unittest

import numpy as np
import numpy.testing as npt

from exprlang import Binary, Const, ExprError, Expression, Unary, Var, derivative, evaluate, parse, to_source

COEFFICIENTS = [
    "-0.25*x^3",
    "0.57*x",
    "0.15*(x-x^5)",
    "0.32*sin(x)",
    "1-x",
    "0.76*(1+cos(x))",
    "0.84*(1+sin(x))",
    "0.35*x+0.2",
    "exp(-x^2)/(1+x^2)",
    "tanh(2*x)*abs(x)",
    "x^(-2)",
]


class TestParse(unittest.TestCase):
    def test_precedence_and_associativity(self):
        cases = {
            "2+3*4": 14.0,
            "(2+3)*4": 20.0,
            "8/4/2": 1.0,
            "10-4-3": 3.0,
            "-2^2": -4.0,
            "2*-3": -6.0,
            "2^3*2": 16.0,
        }
        for source, expected in cases.items():
            with self.subTest(source=source):
                self.assertEqual(evaluate(parse(source), 0.0), expected)

    def test_tree_shape(self):
        self.assertEqual(parse("1-x"), Binary("-", Const(1.0), Var("x")))
        self.assertEqual(parse("-x^2"), Unary("neg", Binary("^", Var("x"), Const(2.0))))
        self.assertEqual(parse("-3"), Const(-3.0))

    def test_syntax_error_reports_offset(self):
        with self.assertRaises(ExprError) as ctx:
            parse("x + $")
        self.assertEqual(ctx.exception.offset, 4)

    def test_offsets_count_utf8_bytes(self):
        with self.assertRaises(ExprError) as ctx:
            parse("x*\u00a0)")
        self.assertEqual(ctx.exception.offset, 4)
        self.assertIn("at byte 4", str(ctx.exception))
        with self.assertRaises(ExprError) as ctx:
            parse("\u3000x*")
        self.assertEqual(ctx.exception.offset, 5)
        with self.assertRaises(ExprError) as ctx:
            parse("x+\u00e9")
        self.assertEqual(ctx.exception.offset, 2)

    def test_rejections(self):
        for source in ["", "x+", "y*2", "x^1.5", "x^x", "x^2^3", "sin x", "(x", "x)"]:
            with self.subTest(source=source):
                with self.assertRaises(ExprError):
                    parse(source)

    def test_only_listed_functions_parse(self):
        for name in ("sin", "cos", "exp", "tanh", "abs", "sign"):
            with self.subTest(name=name):
                self.assertEqual(parse(f"{name}(x)"), Unary(name, Var("x")))
        for source in ("pi*x", "e+x", "tan(x)", "log(x)", "sqrt(x)"):
            with self.subTest(source=source):
                with self.assertRaises(ExprError):
                    parse(source)

    def test_expr_error_is_a_value_error(self):
        self.assertTrue(issubclass(ExprError, ValueError))


class TestEvaluate(unittest.TestCase):
    def test_scalar_and_array(self):
        ast = parse("0.76*(1+cos(x))")
        self.assertIsInstance(evaluate(ast, 0.5), float)
        x = np.linspace(-2, 2, 7)
        npt.assert_allclose(evaluate(ast, x), 0.76 * (1 + np.cos(x)))

    def test_undefined_values_are_nan(self):
        self.assertTrue(math.isnan(evaluate(parse("1/x"), 0.0)))
        self.assertTrue(math.isnan(evaluate(parse("x^(-1)"), 0.0)))
        values = evaluate(parse("1/x"), np.array([0.0, 2.0]))
        self.assertTrue(np.isnan(values[0]))
        self.assertEqual(values[1], 0.5)

    def test_overflow_is_nan(self):
        self.assertTrue(math.isnan(evaluate(parse("exp(x)"), 1000.0)))


class TestDerivative(unittest.TestCase):
    def test_matches_central_differences(self):
        x = np.array([-1.3, -0.4, 0.7, 1.5, 2.2])
        h = 1e-6
        for source in COEFFICIENTS:
            with self.subTest(source=source):
                ast = parse(source)
                numeric = (evaluate(ast, x + h) - evaluate(ast, x - h)) / (2 * h)
                npt.assert_allclose(evaluate(derivative(ast), x), numeric, rtol=1e-5, atol=1e-6)

    def test_trivial_folding(self):
        self.assertEqual(derivative(parse("3")), Const(0.0))
        self.assertEqual(derivative(parse("x")), Const(1.0))
        self.assertEqual(derivative(parse("2*x")), Const(2.0))

    def test_abs_uses_sign(self):
        d = derivative(parse("abs(x)"))
        npt.assert_array_equal(evaluate(d, np.array([-2.0, 0.0, 3.0])), [-1.0, 0.0, 1.0])


class TestPrinting(unittest.TestCase):
    def test_printed_trees_parse_back(self):
        for source in COEFFICIENTS:
            ast = parse(source)
            for tree in (ast, derivative(ast)):
                with self.subTest(tree=to_source(tree)):
                    self.assertEqual(parse(to_source(tree)), tree)


class TestExpression(unittest.TestCase):
    def test_value_and_prime(self):
        g = Expression("0.84*(1+sin(x))")
        self.assertAlmostEqual(g(0.3), 0.84 * (1 + math.sin(0.3)))
        self.assertAlmostEqual(g.prime(0.3), 0.84 * math.cos(0.3))

    def test_invalid_source(self):
        with self.assertRaises(ExprError):
            Expression("1 +* x")


if __name__ == "__main__":
    unittest.main()
