"""Step 02: 軌跡・セグメント・プロンプト - テストモジュール

このステップでは、return-to-go、デモプールの構築、トークン変換、
プールファイルの読み書きを確認します。
"""
